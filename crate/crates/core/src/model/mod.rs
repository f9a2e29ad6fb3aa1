//! The completion network: a shared point encoder, a per-viewpoint face
//! transformer, a class head, and a fusion head emitting offsets and opacities.

mod params;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use params::{grid_resample_matrix, resample_grid_embedding, BoundParams, ModelParams};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{
    assemble_output, build_view_rig, generate_candidates, normalize_cloud, union_prediction,
    CandidateSet, CloudRole, Point3, PointCloud, Prediction, ViewRig,
};

/// Offsets are `OFFSET_CAP * tanh(raw)` per local axis.
pub const OFFSET_CAP: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_en: usize,
    pub n_heads: usize,
    /// Cross + self attention blocks in the face transformer.
    pub n_layers: usize,
    /// Number of shape categories.
    pub c: usize,
    pub v_count: usize,
    /// Grid resolution the positional table is trained at.
    pub r: usize,
    /// Hidden widths of the point encoder; its output width is `d_en`.
    pub mlp_widths: Vec<usize>,
    pub cls_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_en: 128,
            n_heads: 4,
            n_layers: 1,
            c: 3,
            v_count: 6,
            r: 21,
            mlp_widths: vec![64, 128],
            cls_hidden: 64,
        }
    }
}

impl ModelConfig {
    /// Checks ranges; messages start with the offending field name.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::InvalidArgument(format!("{field}: {msg}")));
        if self.d_en == 0 {
            return bad("d_en", "must be at least 1");
        }
        if self.n_heads == 0 || !self.d_en.is_multiple_of(self.n_heads) {
            return bad(
                "n_heads",
                &format!("must be >= 1 and divide d_en ({})", self.d_en),
            );
        }
        if self.c < 2 {
            return bad("c", "needs at least 2 categories");
        }
        if self.v_count != 6 {
            return bad("v_count", "only the 6-face rig is supported");
        }
        if self.r == 0 {
            return bad("r", "must be at least 1");
        }
        if self.mlp_widths.contains(&0) {
            return bad("mlp_widths", "every width must be at least 1");
        }
        if self.cls_hidden == 0 {
            return bad("cls_hidden", "must be at least 1");
        }
        Ok(())
    }

    /// Encoder layer widths including the final `d_en`.
    pub fn encoder_widths(&self) -> Vec<usize> {
        let mut w = self.mlp_widths.clone();
        w.push(self.d_en);
        w
    }

    pub fn ffn_width(&self) -> usize {
        2 * self.d_en
    }

    pub fn rig(&self, spread: f64) -> Result<ViewRig> {
        build_view_rig(self.v_count, self.r, spread)
    }
}

/// Switches for the two ablated components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub use_classification: bool,
    pub use_face_attention: bool,
}

impl Ablation {
    pub const FULL: Self = Self {
        use_classification: true,
        use_face_attention: true,
    };
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

/// Category probabilities; non-negative and summing to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution {
    probs: Vec<f64>,
}

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "not a probability vector (sum {sum})"
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform(c: usize) -> Self {
        Self {
            probs: vec![1.0 / c as f64; c],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Most probable category; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

fn linear(g: &mut Graph, p: &BoundParams<'_>, x: Var, prefix: &str) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"));
    let b = p.var(&format!("{prefix}.b"));
    g.linear(x, w, b)
}

fn norm(g: &mut Graph, p: &BoundParams<'_>, x: Var, prefix: &str) -> Result<Var> {
    let gamma = p.var(&format!("{prefix}.g"));
    let beta = p.var(&format!("{prefix}.b"));
    g.layer_norm(x, gamma, beta)
}

fn points_tensor(points: &[Point3]) -> Result<Tensor> {
    let data = points.iter().flatten().copied().collect();
    Tensor::matrix(points.len(), 3, data)
}

/// Per-point features `N x d_en` from the shared point-wise MLP.
pub fn encode(g: &mut Graph, p: &BoundParams<'_>, points: &[Point3]) -> Result<Var> {
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut x = g.constant(points_tensor(points)?);
    let layers = p.config().encoder_widths().len();
    for l in 0..layers {
        x = linear(g, p, x, &format!("enc.{l}"))?;
        if l + 1 < layers {
            x = g.relu(x);
        }
    }
    Ok(x)
}

/// Column-wise max over the encoded input: `1 x d_en`.
pub fn global_feature(g: &mut Graph, p: &BoundParams<'_>, points: &[Point3]) -> Result<Var> {
    let f = encode(g, p, points)?;
    g.maxpool_over_rows(f)
}

/// Grid positional table for the candidate set's resolution.
fn grid_embedding(g: &mut Graph, p: &BoundParams<'_>, r: usize) -> Result<Var> {
    let table = p.var("pos");
    let trained = p.config().r;
    if r == trained {
        return Ok(table);
    }
    let w = g.constant(grid_resample_matrix(trained, r));
    g.matmul(w, table)
}

fn attention_block(
    g: &mut Graph,
    p: &BoundParams<'_>,
    x: Var,
    kv: Var,
    groups: usize,
    prefix: &str,
) -> Result<(Var, Var)> {
    let q = linear(g, p, x, &format!("{prefix}.q"))?;
    let k = linear(g, p, kv, &format!("{prefix}.k"))?;
    let v = linear(g, p, kv, &format!("{prefix}.v"))?;
    let a = g.attention(q, k, v, p.config().n_heads, groups)?;
    Ok((a, linear(g, p, a, &format!("{prefix}.o"))?))
}

/// Per-viewpoint cross-attention to the global feature, then self-attention
/// inside each viewpoint group. Rows of different groups never interact.
pub fn face_transformer(
    g: &mut Graph,
    p: &BoundParams<'_>,
    f_s: Var,
    f_i: Var,
    candidates: &CandidateSet,
) -> Result<Var> {
    let cfg = p.config();
    let m = g.value(f_s).shape()[0];
    if m != candidates.len() || candidates.v_count != cfg.v_count {
        return Err(Error::Grouping {
            rows: m,
            groups: cfg.v_count,
        });
    }
    let slots: Vec<usize> = (0..m).map(|i| candidates.slot_index(i)).collect();
    let view_pos = g.gather_rows(p.var("fpos"), &candidates.view_index)?;
    let table = grid_embedding(g, p, candidates.grid_resolution)?;
    let slot_pos = g.gather_rows(table, &slots)?;

    let mut x = f_s;
    for l in 0..cfg.n_layers {
        let q = g.add(x, view_pos)?;
        let (_, a) = attention_block(g, p, q, f_i, 1, &format!("tf.{l}.cross"))?;
        let r = g.add(q, a)?;
        x = norm(g, p, r, &format!("tf.{l}.cross.ln"))?;

        let s = g.add(x, slot_pos)?;
        let (_, a) = attention_block(g, p, s, s, cfg.v_count, &format!("tf.{l}.self"))?;
        let r = g.add(s, a)?;
        x = norm(g, p, r, &format!("tf.{l}.self.ln"))?;

        let h = linear(g, p, x, &format!("tf.{l}.ffn.0"))?;
        let h = g.relu(h);
        let h = linear(g, p, h, &format!("tf.{l}.ffn.1"))?;
        let r = g.add(x, h)?;
        x = norm(g, p, r, &format!("tf.{l}.ffn.ln"))?;
    }
    Ok(x)
}

/// Class probabilities `1 x c` from the global feature.
pub fn classify(g: &mut Graph, p: &BoundParams<'_>, f_i: Var) -> Result<Var> {
    let h = linear(g, p, f_i, "cls.0")?;
    let h = g.relu(h);
    let logits = linear(g, p, h, "cls.1")?;
    g.softmax_lastdim(logits)
}

/// Offsets `M x 3` (local frame, tanh-capped) and opacities `M x 1`.
pub fn fuse(g: &mut Graph, p: &BoundParams<'_>, f: Var, p_cls: Var) -> Result<(Var, Var)> {
    let m = g.value(f).shape()[0];
    let z = linear(g, p, f, "fuse.down")?;
    let e = linear(g, p, z, "fuse.up")?;
    let e = g.relu(e);
    let cls_rows = g.gather_rows(p_cls, &vec![0; m])?;
    let h = g.concat_lastdim(&[e, cls_rows])?;
    let out = linear(g, p, h, "fuse.head")?;
    let raw = g.slice_cols(out, 0, 3)?;
    let t = g.tanh(raw);
    let offsets = g.scale(t, OFFSET_CAP);
    let logit = g.slice_cols(out, 3, 1)?;
    let opacity = g.sigmoid(logit);
    Ok((offsets, opacity))
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct GraphOutput {
    pub offsets: Var,
    pub opacity: Var,
    pub class_probs: Var,
}

/// The full network on a graph. `input` and `candidates` share one frame.
pub fn forward_graph(
    g: &mut Graph,
    p: &BoundParams<'_>,
    input: &PointCloud,
    candidates: &CandidateSet,
    ablation: Ablation,
) -> Result<GraphOutput> {
    let f_i = global_feature(g, p, input.points())?;
    let f_s = encode(g, p, &candidates.points)?;
    let f = if ablation.use_face_attention {
        face_transformer(g, p, f_s, f_i, candidates)?
    } else {
        f_s
    };
    let class_probs = if ablation.use_classification {
        classify(g, p, f_i)?
    } else {
        let c = p.config().c;
        g.constant(Tensor::full(&[1, c], 1.0 / c as f64))
    };
    let (offsets, opacity) = fuse(g, p, f, class_probs)?;
    Ok(GraphOutput {
        offsets,
        opacity,
        class_probs,
    })
}

/// Pure inference: per-candidate prediction and the class distribution.
pub fn forward(
    params: &ModelParams,
    input: &PointCloud,
    candidates: &CandidateSet,
    ablation: Ablation,
) -> Result<(Prediction, ClassDistribution)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let out = forward_graph(&mut g, &p, input, candidates, ablation)?;
    let offsets = g
        .value(out.offsets)
        .data()
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    let opacities = g.value(out.opacity).data().to_vec();
    let probs = g.value(out.class_probs).data().to_vec();
    Ok((
        Prediction::new(offsets, opacities)?,
        ClassDistribution::new(probs)?,
    ))
}

impl ModelParams {
    /// `N x d_en` encoder features of a cloud.
    pub fn encode(&self, cloud: &PointCloud) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let f = encode(&mut g, &p, cloud.points())?;
        Ok(g.value(f).clone())
    }

    /// `1 x d_en` max-pooled global feature.
    pub fn global_feature(&self, cloud: &PointCloud) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let f = global_feature(&mut g, &p, cloud.points())?;
        Ok(g.value(f).clone())
    }

    pub fn classify(&self, f_i: &Tensor) -> Result<ClassDistribution> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(f_i.clone());
        let probs = classify(&mut g, &p, x)?;
        ClassDistribution::new(g.value(probs).data().to_vec())
    }
}

/// Everything produced by completing one partial cloud. Candidates and the
/// per-candidate prediction stay in the normalized frame.
#[derive(Clone, Debug)]
pub struct Completion {
    /// Refined candidates that passed the opacity filter.
    pub output: PointCloud,
    /// Input plus output.
    pub predicted: PointCloud,
    pub class: ClassDistribution,
    pub candidates: CandidateSet,
    pub prediction: Prediction,
}

/// Completes a cloud that is already in the unit-normalized frame.
pub fn complete_normalized(
    params: &ModelParams,
    rig: &ViewRig,
    input: &PointCloud,
    ablation: Ablation,
    threshold: f64,
    seed: u64,
) -> Result<Completion> {
    if input.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let candidates = generate_candidates(rig, input, seed);
    let (prediction, class) = forward(params, input, &candidates, ablation)?;
    let output = assemble_output(&candidates, &prediction, threshold)?;
    let predicted = union_prediction(input, &output);
    Ok(Completion {
        output,
        predicted,
        class,
        candidates,
        prediction,
    })
}

/// Completes a cloud in arbitrary coordinates: normalizes, completes, and
/// maps the outputs back to the input frame.
pub fn complete(
    params: &ModelParams,
    rig: &ViewRig,
    input: &PointCloud,
    ablation: Ablation,
    threshold: f64,
    seed: u64,
) -> Result<Completion> {
    let (normalized, transform) = normalize_cloud(input)?;
    let mut done = complete_normalized(params, rig, &normalized, ablation, threshold, seed)?;
    done.output = transform
        .invert_cloud(&done.output)
        .with_role(CloudRole::Output);
    done.predicted = union_prediction(input, &done.output);
    Ok(done)
}

#[cfg(test)]
mod tests;
