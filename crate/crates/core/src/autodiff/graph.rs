//! Single-use gradient tape.
//!
//! Every operation appends a node whose inputs already exist, so node order is
//! a topological order and `backward` is a single reverse sweep.

use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{
    gather_cols, gemm, gemm_into, scatter_cols_add, softmax_row, softmax_row_backward,
    softmax_row_backward_in_place, MatMut, MatRef,
};
use super::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{v3, LocalFrame, Point3};
use crate::metrics::NnIndex;

pub const LAYER_NORM_EPS: f64 = 1e-6;
/// Probabilities are clamped to this floor before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;
/// Query rows per cache block in the attention passes.
const ATTENTION_TILE: usize = 128;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaxPoolRows {
        x: Var,
        argmax: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: usize,
        /// One `[query][key]` block per `(group, head)`, kept separate so
        /// each stays small enough for the allocator to recycle.
        weights: Vec<Vec<f64>>,
    },
    FrameTransform {
        x: Var,
        frames: Vec<LocalFrame>,
    },
    Sum(Var),
    Mean(Var),
    /// Local gradient is fixed once nearest neighbors are assigned.
    Chamfer {
        pred: Var,
        local_grad: Vec<f64>,
    },
    Bce {
        p: Var,
        targets: Vec<f64>,
        pos_weight: f64,
    },
    Nll {
        p: Var,
        label: usize,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Records a forward computation and replays it backwards once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn needs_saved(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let out = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `x * w + b` with `b` a `1 x n` row; one node instead of a matmul and
    /// a bias add.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(x).dims2("linear")?;
        let (k2, n) = self.value(w).dims2("linear")?;
        let (br, bn) = self.value(b).dims2("linear")?;
        if k != k2 {
            return Err(Error::shape(
                "linear",
                self.value(x).shape(),
                self.value(w).shape(),
            ));
        }
        if br != 1 || bn != n {
            return Err(Error::shape(
                "linear",
                self.value(w).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(self.value(b).data());
        }
        gemm_into(
            1.0,
            MatRef::new(self.value(x).data(), m, k),
            MatRef::new(self.value(w).data(), k, n),
            1.0,
            MatMut::new(&mut out, m, n),
        );
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::Linear { x, w, b },
            &[x, w, b],
        ))
    }

    /// Adds a `1 x d` row to every row of an `L x d` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, d) = self.value(x).dims2("add_bias")?;
        let (br, bd) = self.value(bias).dims2("add_bias")?;
        if br != 1 || bd != d {
            return Err(Error::shape(
                "add_bias",
                self.value(x).shape(),
                self.value(bias).shape(),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(d.max(1)) {
            add_into(row, &b);
        }
        Ok(self.push(
            Tensor::matrix(rows, d, out)?,
            Op::AddRow(x, bias),
            &[x, bias],
        ))
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        same_shape(op_name, self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same length");
        self.push(t, op, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, |v| 1.0 / (1.0 + crate::math::exp(-v)), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, libm::tanh, Op::Tanh(x))
    }

    /// Softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", t.shape(), &[1]))?;
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(d.max(1)) {
            softmax_row(row);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Row-wise normalization to zero mean and unit variance, then `* gamma + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, d) = self.value(x).dims2("layer_norm")?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [1, d] {
                return Err(Error::shape(
                    "layer_norm",
                    self.value(x).shape(),
                    self.value(p).shape(),
                ));
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let src = self.value(x).data();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            inv_std[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let save = self.needs_saved(&[x, gamma, beta]);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: if save { xhat } else { Vec::new() },
            inv_std: if save { inv_std } else { Vec::new() },
        };
        Ok(self.push(Tensor::matrix(rows, d, out)?, op, &[x, gamma, beta]))
    }

    /// Column-wise maximum over rows: `L x d -> 1 x d`.
    pub fn maxpool_over_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = self.value(x).dims2("maxpool_over_rows")?;
        if rows == 0 {
            return Err(Error::EmptyCloud);
        }
        let src = self.value(x).data();
        let mut out = src[..d].to_vec();
        let mut argmax = vec![0usize; d];
        for r in 1..rows {
            for c in 0..d {
                let v = src[r * d + c];
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = r;
                }
            }
        }
        Ok(self.push(
            Tensor::matrix(1, d, out)?,
            Op::MaxPoolRows { x, argmax },
            &[x],
        ))
    }

    /// Concatenates matrices with equal row counts along the last dimension.
    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_lastdim", &[], &[]))?;
        let (rows, _) = self.value(first).dims2("concat_lastdim")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_lastdim")?;
            if r != rows {
                return Err(Error::shape(
                    "concat_lastdim",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor::matrix(rows, total, out)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", &[], &[]))?;
        let (_, cols) = self.value(first).dims2("concat_rows")?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_rows")?;
            if c != cols {
                return Err(Error::shape(
                    "concat_rows",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        Ok(self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2("slice_cols")?;
        if start + width > cols {
            return Err(Error::shape(
                "slice_cols",
                self.value(x).shape(),
                &[start, width],
            ));
        }
        let out = gather_cols(self.value(x).data(), rows, cols, start, width);
        Ok(self.push(
            Tensor::matrix(rows, width, out)?,
            Op::SliceCols { x, start },
            &[x],
        ))
    }

    /// `out[i] = x[index[i]]`; indices may repeat, which broadcasts rows.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2("gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", self.value(x).shape(), &[bad]));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            out.extend_from_slice(src.row(i));
        }
        let t = Tensor::matrix(index.len(), cols, out)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// Multi-head scaled dot-product attention with a `1/sqrt(d_head)` scale.
    /// Rows of `q` and of `k`/`v` are split into `groups` equal contiguous
    /// blocks, and block `g` of the queries only attends to block `g` of the keys.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: usize,
    ) -> Result<Var> {
        let (lq, d) = self.value(q).dims2("attention")?;
        let (lk, dk) = self.value(k).dims2("attention")?;
        if dk != d || self.value(v).shape() != self.value(k).shape() {
            return Err(Error::shape(
                "attention",
                self.value(q).shape(),
                self.value(v).shape(),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(alloc::format!(
                "width {d} is not divisible into {heads} heads"
            )));
        }
        if groups == 0 || lq % groups != 0 {
            return Err(Error::Grouping { rows: lq, groups });
        }
        if lk % groups != 0 {
            return Err(Error::Grouping { rows: lk, groups });
        }
        let (gq, gk, dh) = (lq / groups, lk / groups, d / heads);
        let scale = 1.0 / libm::sqrt(dh as f64);
        let save = self.needs_saved(&[q, k, v]);
        let mut weights = Vec::with_capacity(if save { groups * heads } else { 0 });
        let mut out = vec![0.0; lq * d];
        let mut scratch = Vec::new();
        let qm = MatRef::new(self.value(q).data(), lq, d);
        let km = MatRef::new(self.value(k).data(), lk, d);
        let vm = MatRef::new(self.value(v).data(), lk, d);
        for g in 0..groups {
            for h in 0..heads {
                let kh = km.rows(g * gk, gk).cols(h * dh, dh);
                let vh = vm.rows(g * gk, gk).cols(h * dh, dh);
                // Saved blocks are written in place; otherwise one tile of
                // scratch is reused.
                let mut block = if save { vec![0.0; gq * gk] } else { Vec::new() };
                let mut r0 = 0;
                while r0 < gq {
                    let tr = ATTENTION_TILE.min(gq - r0);
                    let p = if save {
                        &mut block[r0 * gk..(r0 + tr) * gk]
                    } else {
                        scratch.resize(tr * gk, 0.0);
                        &mut scratch[..]
                    };
                    let qh = qm.rows(g * gq + r0, tr).cols(h * dh, dh);
                    gemm_into(scale, qh, kh.t(), 0.0, MatMut::new(p, tr, gk));
                    for row in p.chunks_exact_mut(gk) {
                        softmax_row(row);
                    }
                    let oh = MatMut::new(&mut out, lq, d)
                        .rows(g * gq + r0, tr)
                        .cols(h * dh, dh);
                    gemm_into(1.0, MatRef::new(p, tr, gk), vh, 0.0, oh);
                    r0 += tr;
                }
                if save {
                    // Blocks are appended in `[group][head]` order.
                    weights.push(block);
                }
            }
        }
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            groups,
            weights,
        };
        Ok(self.push(Tensor::matrix(lq, d, out)?, op, &[q, k, v]))
    }

    /// Attention weights saved by an attention node, laid out as
    /// `[group][head][query][key]`. Empty when no input required gradients.
    pub fn attention_weights(&self, v: Var) -> Option<Vec<f64>> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights.concat()),
            _ => None,
        }
    }

    /// Rotates each `1 x 3` row of `x` from its local frame into world axes.
    pub fn frame_transform(&mut self, x: Var, frames: &[LocalFrame]) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2("frame_transform")?;
        if cols != 3 || rows != frames.len() {
            return Err(Error::shape(
                "frame_transform",
                self.value(x).shape(),
                &[frames.len(), 3],
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * 3);
        for (r, f) in frames.iter().enumerate() {
            out.extend_from_slice(&f.to_world([src[3 * r], src[3 * r + 1], src[3 * r + 2]]));
        }
        let t = Tensor::matrix(rows, 3, out)?;
        Ok(self.push(
            t,
            Op::FrameTransform {
                x,
                frames: frames.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Symmetric Chamfer distance (Euclidean, not squared) between the rows of
    /// `pred` (`K x 3`) and a fixed target set. Nearest-neighbor assignments are
    /// treated as constants; coincident pairs contribute a zero subgradient.
    pub fn chamfer_l1(&mut self, pred: Var, target: &[Point3]) -> Result<Var> {
        let (k, cols) = self.value(pred).dims2("chamfer_l1")?;
        if cols != 3 {
            return Err(Error::shape(
                "chamfer_l1",
                self.value(pred).shape(),
                &[k, 3],
            ));
        }
        if k == 0 || target.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let pts: Vec<Point3> = self
            .value(pred)
            .data()
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        let pred_index = NnIndex::new(&pts);
        let target_index = NnIndex::new(target);
        let (wf, wb) = (0.5 / k as f64, 0.5 / target.len() as f64);
        let mut local_grad = vec![0.0; k * 3];
        let mut forward = 0.0;
        for (i, &p) in pts.iter().enumerate() {
            let (j, d2) = target_index.nearest(p)?;
            let d = libm::sqrt(d2);
            forward += d;
            if d > 0.0 {
                let dir = v3::scale(v3::sub(p, target[j]), wf / d);
                add_into(&mut local_grad[3 * i..3 * i + 3], &dir);
            }
        }
        let mut backward = 0.0;
        for &t in target {
            let (i, d2) = pred_index.nearest(t)?;
            let d = libm::sqrt(d2);
            backward += d;
            if d > 0.0 {
                let dir = v3::scale(v3::sub(pts[i], t), wb / d);
                add_into(&mut local_grad[3 * i..3 * i + 3], &dir);
            }
        }
        let loss = 0.5 * (forward / k as f64 + backward / target.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Chamfer { pred, local_grad },
            &[pred],
        ))
    }

    /// Mean binary cross-entropy of probabilities `p` against fixed 0/1 targets.
    pub fn bce(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        self.bce_weighted(p, targets, 1.0)
    }

    /// [`Graph::bce`] with the positive-target term scaled by `pos_weight`.
    pub fn bce_weighted(&mut self, p: Var, targets: &[f64], pos_weight: f64) -> Result<Var> {
        let t = self.value(p);
        if t.numel() != targets.len() || targets.is_empty() {
            return Err(Error::shape("bce", t.shape(), &[targets.len()]));
        }
        let n = targets.len() as f64;
        let loss = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                -(pos_weight * y * libm::log(p) + (1.0 - y) * libm::log(1.0 - p))
            })
            .sum::<f64>()
            / n;
        let op = Op::Bce {
            p,
            targets: targets.to_vec(),
            pos_weight,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[p]))
    }

    /// `-ln p[label]` for a probability row, with `p` floored at [`PROB_FLOOR`].
    pub fn nll(&mut self, p: Var, label: usize) -> Result<Var> {
        let t = self.value(p);
        if label >= t.numel() {
            return Err(Error::Label {
                label,
                classes: t.numel(),
            });
        }
        let loss = -libm::log(t.data()[label].max(PROB_FLOOR));
        Ok(self.push(Tensor::scalar(loss), Op::Nll { p, label }, &[p]))
    }

    /// Accumulates `d loss / d leaf` into every leaf that requires gradients and
    /// then drops the recorded operations. A tape can only be replayed once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, g, &mut grads);
        }

        for node in &mut self.nodes {
            // Only leaves carry gradients; intermediates are dropped to `Leaf`
            // afterwards so their saved state is released.
            let leaf = matches!(node.op, Op::Leaf);
            node.op = Op::Leaf;
            if leaf && node.requires_grad && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn propagate(&mut self, id: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        if let Op::Leaf = self.nodes[id].op {
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(existing) => add_into(existing.data_mut(), &g),
                None => {
                    node.grad =
                        Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
            }
            return;
        }
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Hands over an owned gradient, moving it into an empty slot.
        let give = |grads: &mut [Option<Vec<f64>>], v: Var, grad: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => add_into(buf, &grad),
                slot => *slot = Some(grad),
            }
        };
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let node = &nodes[v.0];
            if !node.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
            f(buf);
        };
        let val = |v: Var| &nodes[v.0].value;
        let out = &nodes[id].value;

        match &nodes[id].op {
            Op::Leaf => unreachable!("leaves handled above"),
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                let gm = MatRef::new(&g, m, n);
                acc(*a, &mut |buf| {
                    let bm = MatRef::new(val(*b).data(), k, n);
                    gemm_into(1.0, gm, bm.t(), 1.0, MatMut::new(buf, m, k));
                });
                acc(*b, &mut |buf| {
                    let am = MatRef::new(val(*a).data(), m, k);
                    gemm_into(1.0, am.t(), gm, 1.0, MatMut::new(buf, k, n));
                });
            }
            Op::Linear { x, w, b } => {
                let (m, k) = (val(*x).shape()[0], val(*x).shape()[1]);
                let n = val(*w).shape()[1];
                let gm = MatRef::new(&g, m, n);
                acc(*x, &mut |buf| {
                    let wm = MatRef::new(val(*w).data(), k, n);
                    gemm_into(1.0, gm, wm.t(), 1.0, MatMut::new(buf, m, k));
                });
                acc(*w, &mut |buf| {
                    let xm = MatRef::new(val(*x).data(), m, k);
                    gemm_into(1.0, xm.t(), gm, 1.0, MatMut::new(buf, k, n));
                });
                acc(*b, &mut |buf| {
                    for row in g.chunks_exact(n.max(1)) {
                        add_into(buf, row);
                    }
                });
            }
            Op::AddRow(x, bias) => {
                let d = val(*bias).numel();
                acc(*bias, &mut |buf| {
                    for row in g.chunks_exact(d.max(1)) {
                        add_into(buf, row);
                    }
                });
                give(grads, *x, g);
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    give(grads, *a, g.clone());
                }
                give(grads, *b, g);
            }
            Op::Sub(a, b) => {
                if wants(*b) {
                    give(grads, *b, g.iter().map(|v| -v).collect());
                }
                give(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    give(
                        grads,
                        *a,
                        g.iter().zip(val(*b).data()).map(|(s, y)| s * y).collect(),
                    );
                }
                if wants(*b) {
                    give(
                        grads,
                        *b,
                        g.iter().zip(val(*a).data()).map(|(s, x)| s * x).collect(),
                    );
                }
            }
            Op::Scale(x, s) => give(grads, *x, g.iter().map(|v| v * s).collect()),
            Op::Relu(x) => {
                let mut g = g;
                for (d, &xi) in g.iter_mut().zip(val(*x).data()) {
                    if xi <= 0.0 {
                        *d = 0.0;
                    }
                }
                give(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let mut g = g;
                for (d, &y) in g.iter_mut().zip(out.data()) {
                    *d *= y * (1.0 - y);
                }
                give(grads, *x, g);
            }
            Op::Tanh(x) => {
                let mut g = g;
                for (d, &y) in g.iter_mut().zip(out.data()) {
                    *d *= 1.0 - y * y;
                }
                give(grads, *x, g);
            }
            Op::Softmax(x) => {
                let d = *out.shape().last().unwrap_or(&1);
                acc(*x, &mut |buf| {
                    for ((y, dy), dx) in out
                        .data()
                        .chunks_exact(d)
                        .zip(g.chunks_exact(d))
                        .zip(buf.chunks_exact_mut(d))
                    {
                        softmax_row_backward(y, dy, dx);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = val(*gamma).numel();
                let gam = val(*gamma).data();
                acc(*x, &mut |buf| {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..inv_std.len() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..d {
                            dxhat[c] = gr[c] * gam[c];
                            s1 += dxhat[c];
                            s2 += dxhat[c] * hr[c];
                        }
                        let k = inv_std[r] / d as f64;
                        for c in 0..d {
                            buf[r * d + c] += k * (d as f64 * dxhat[c] - s1 - hr[c] * s2);
                        }
                    }
                });
                acc(*gamma, &mut |buf| {
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for c in 0..d {
                            buf[c] += gr[c] * hr[c];
                        }
                    }
                });
                acc(*beta, &mut |buf| {
                    for gr in g.chunks_exact(d) {
                        add_into(buf, gr);
                    }
                });
            }
            Op::MaxPoolRows { x, argmax } => {
                let d = argmax.len();
                acc(*x, &mut |buf| {
                    for (c, &r) in argmax.iter().enumerate() {
                        buf[r * d + c] += g[c];
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let mut start = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    let rows = val(p).shape()[0];
                    acc(p, &mut |buf| {
                        let slice = gather_cols(&g, rows, total, start, w);
                        add_into(buf, &slice);
                    });
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = val(p).numel();
                    acc(p, &mut |buf| add_into(buf, &g[start..start + n]));
                    start += n;
                }
            }
            Op::SliceCols { x, start } => {
                let width = out.shape()[1];
                let cols = val(*x).shape()[1];
                acc(*x, &mut |buf| {
                    scatter_cols_add(buf, cols, &g, *start, width)
                });
            }
            Op::GatherRows { x, index } => {
                let cols = out.shape()[1];
                acc(*x, &mut |buf| {
                    for (r, &i) in index.iter().enumerate() {
                        add_into(
                            &mut buf[i * cols..(i + 1) * cols],
                            &g[r * cols..(r + 1) * cols],
                        );
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                weights,
            } => {
                let (lq, d) = (val(*q).shape()[0], val(*q).shape()[1]);
                let lk = val(*k).shape()[0];
                let (gq, gk, dh) = (lq / groups, lk / groups, d / heads);
                let scale = 1.0 / libm::sqrt(dh as f64);
                let mut dq = vec![0.0; lq * d];
                let mut dk = vec![0.0; lk * d];
                let mut dv = vec![0.0; lk * d];
                let qm = MatRef::new(val(*q).data(), lq, d);
                let km = MatRef::new(val(*k).data(), lk, d);
                let vm = MatRef::new(val(*v).data(), lk, d);
                let gm = MatRef::new(&g, lq, d);
                // Query rows are processed in tiles so each slice of the
                // weights and its gradient stays in cache across the products.
                let tile = ATTENTION_TILE.min(gq);
                let mut ds = vec![0.0; tile * gk];
                for grp in 0..*groups {
                    for h in 0..*heads {
                        let pw = &weights[grp * heads + h];
                        let (kr, cr) = ((grp * gk, gk), (h * dh, dh));
                        let kh = km.rows(kr.0, kr.1).cols(cr.0, cr.1);
                        let vh = vm.rows(kr.0, kr.1).cols(cr.0, cr.1);
                        let mut r0 = 0;
                        while r0 < gq {
                            let tr = tile.min(gq - r0);
                            let qr = (grp * gq + r0, tr);
                            let p = MatRef::new(&pw[r0 * gk..(r0 + tr) * gk], tr, gk);
                            let qh = qm.rows(qr.0, qr.1).cols(cr.0, cr.1);
                            let doh = gm.rows(qr.0, qr.1).cols(cr.0, cr.1);

                            let dvh = MatMut::new(&mut dv, lk, d)
                                .rows(kr.0, kr.1)
                                .cols(cr.0, cr.1);
                            gemm_into(1.0, p.t(), doh, 1.0, dvh);
                            let dst = &mut ds[..tr * gk];
                            gemm_into(1.0, doh, vh.t(), 0.0, MatMut::new(dst, tr, gk));
                            for (pr, dr) in pw[r0 * gk..(r0 + tr) * gk]
                                .chunks_exact(gk)
                                .zip(dst.chunks_exact_mut(gk))
                            {
                                softmax_row_backward_in_place(pr, dr);
                            }
                            let dsm = MatRef::new(dst, tr, gk);
                            let dqh = MatMut::new(&mut dq, lq, d)
                                .rows(qr.0, qr.1)
                                .cols(cr.0, cr.1);
                            gemm_into(scale, dsm, kh, 1.0, dqh);
                            let dkh = MatMut::new(&mut dk, lk, d)
                                .rows(kr.0, kr.1)
                                .cols(cr.0, cr.1);
                            gemm_into(scale, dsm.t(), qh, 1.0, dkh);
                            r0 += tr;
                        }
                    }
                }
                for (var, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if !nodes[var.0].requires_grad {
                        continue;
                    }
                    match &mut grads[var.0] {
                        Some(buf) => add_into(buf, &grad),
                        slot => *slot = Some(grad),
                    }
                }
            }
            Op::FrameTransform { x, frames } => acc(*x, &mut |buf| {
                for (r, f) in frames.iter().enumerate() {
                    let w = [g[3 * r], g[3 * r + 1], g[3 * r + 2]];
                    buf[3 * r] += v3::dot(f.x, w);
                    buf[3 * r + 1] += v3::dot(f.y, w);
                    buf[3 * r + 2] += v3::dot(f.z, w);
                }
            }),
            Op::Sum(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = val(*x).numel() as f64;
                acc(*x, &mut |buf| buf.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Chamfer { pred, local_grad } => acc(*pred, &mut |buf| {
                for (d, l) in buf.iter_mut().zip(local_grad) {
                    *d += g[0] * l;
                }
            }),
            Op::Bce {
                p,
                targets,
                pos_weight,
            } => {
                let n = targets.len() as f64;
                acc(*p, &mut |buf| {
                    for ((d, &pi), &y) in buf.iter_mut().zip(val(*p).data()).zip(targets) {
                        if pi > PROB_FLOOR && pi < 1.0 - PROB_FLOOR {
                            *d += g[0] * ((1.0 - y) / (1.0 - pi) - pos_weight * y / pi) / n;
                        }
                    }
                });
            }
            Op::Nll { p, label } => acc(*p, &mut |buf| {
                let pi = val(*p).data()[*label];
                if pi > PROB_FLOOR {
                    buf[*label] -= g[0] / pi;
                }
            }),
        }
    }
}
