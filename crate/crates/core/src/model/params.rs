use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::ModelConfig;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

const EMBED_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    Fan(usize),
    Zero,
    One,
    Embed,
}

struct Slot {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn linear(out: &mut Vec<Slot>, prefix: &str, fan_in: usize, fan_out: usize) {
    out.push(Slot {
        name: format!("{prefix}.w"),
        shape: vec![fan_in, fan_out],
        init: Init::Fan(fan_in),
    });
    out.push(Slot {
        name: format!("{prefix}.b"),
        shape: vec![1, fan_out],
        init: Init::Zero,
    });
}

fn layer_norm(out: &mut Vec<Slot>, prefix: &str, d: usize) {
    out.push(Slot {
        name: format!("{prefix}.g"),
        shape: vec![1, d],
        init: Init::One,
    });
    out.push(Slot {
        name: format!("{prefix}.b"),
        shape: vec![1, d],
        init: Init::Zero,
    });
}

fn attention_block(out: &mut Vec<Slot>, prefix: &str, d: usize) {
    for proj in ["q", "k", "v", "o"] {
        linear(out, &format!("{prefix}.{proj}"), d, d);
    }
}

/// Every parameter tensor in canonical order. Checkpoints store this order.
fn layout(cfg: &ModelConfig) -> Vec<Slot> {
    let d = cfg.d_en;
    let mut out = Vec::new();
    let mut fan_in = 3;
    for (l, &w) in cfg.encoder_widths().iter().enumerate() {
        linear(&mut out, &format!("enc.{l}"), fan_in, w);
        fan_in = w;
    }
    out.push(Slot {
        name: "fpos".into(),
        shape: vec![cfg.v_count, d],
        init: Init::Embed,
    });
    out.push(Slot {
        name: "pos".into(),
        shape: vec![cfg.r * cfg.r, d],
        init: Init::Embed,
    });
    for l in 0..cfg.n_layers {
        attention_block(&mut out, &format!("tf.{l}.cross"), d);
        layer_norm(&mut out, &format!("tf.{l}.cross.ln"), d);
        attention_block(&mut out, &format!("tf.{l}.self"), d);
        layer_norm(&mut out, &format!("tf.{l}.self.ln"), d);
        linear(&mut out, &format!("tf.{l}.ffn.0"), d, cfg.ffn_width());
        linear(&mut out, &format!("tf.{l}.ffn.1"), cfg.ffn_width(), d);
        layer_norm(&mut out, &format!("tf.{l}.ffn.ln"), d);
    }
    linear(&mut out, "cls.0", d, cfg.cls_hidden);
    linear(&mut out, "cls.1", cfg.cls_hidden, cfg.c);
    linear(&mut out, "fuse.down", d, 4);
    linear(&mut out, "fuse.up", 4, d);
    linear(&mut out, "fuse.head", d + cfg.c, 4);
    out
}

/// Named network weights whose shapes are fixed by a [`ModelConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Fresh weights: fan-in scaled uniform matrices, zero biases, unit
    /// layer-norm gains, small Gaussian embeddings.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let slots = layout(config);
        let mut names = Vec::with_capacity(slots.len());
        let mut tensors = Vec::with_capacity(slots.len());
        for (k, slot) in slots.into_iter().enumerate() {
            let mut r = rng::rng_for(seed, &[0x696e6974, k as u64]);
            let t = match slot.init {
                Init::Fan(fan_in) => {
                    Tensor::uniform(&slot.shape, 1.0 / libm::sqrt(fan_in as f64), &mut r)
                }
                Init::Zero => Tensor::zeros(&slot.shape),
                Init::One => Tensor::full(&slot.shape, 1.0),
                Init::Embed => Tensor::randn(&slot.shape, EMBED_STD, &mut r),
            };
            names.push(slot.name);
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    /// Rebuilds parameters from `(name, tensor)` pairs, which must match the
    /// layout implied by `config` exactly.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let slots = layout(config);
        if slots.len() != named.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(slots.len());
        let mut tensors = Vec::with_capacity(slots.len());
        for (slot, (name, t)) in slots.into_iter().zip(named) {
            if slot.name != name {
                return Err(Error::InvalidArgument(format!(
                    "expected parameter `{}`, found `{name}`",
                    slot.name
                )));
            }
            if t.shape() != slot.shape.as_slice() {
                return Err(Error::shape("from_named", &slot.shape, t.shape()));
            }
            if !t.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{name}` is not finite"
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Puts every tensor on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect();
        BoundParams { params: self, vars }
    }

    /// Binds caller-supplied graph variables in canonical order, for
    /// finite-difference checks over the whole network.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<BoundParams<'_>> {
        if vars.len() != self.tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter variables, got {}",
                self.tensors.len(),
                vars.len()
            )));
        }
        Ok(BoundParams { params: self, vars })
    }
}

/// Parameters placed on a graph, addressable by name.
#[derive(Debug)]
pub struct BoundParams<'a> {
    params: &'a ModelParams,
    vars: Vec<Var>,
}

impl BoundParams<'_> {
    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Graph variable of the named parameter. Names come from the fixed
    /// layout, so a miss is a programming error.
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("no parameter named `{name}`"));
        self.vars[i]
    }
}

/// Bilinear map from an `r_from x r_from` grid to an `r_to x r_to` grid,
/// aligned on cell centers, as an `r_to^2 x r_from^2` matrix. Equal sizes
/// give the identity.
pub fn grid_resample_matrix(r_from: usize, r_to: usize) -> Tensor {
    let axis = |t: usize| -> (usize, usize, f64) {
        let src =
            ((t as f64 + 0.5) * r_from as f64 / r_to as f64 - 0.5).clamp(0.0, (r_from - 1) as f64);
        let i0 = libm::floor(src) as usize;
        let i1 = (i0 + 1).min(r_from - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut m = Tensor::zeros(&[r_to * r_to, r_from * r_from]);
    let cols = r_from * r_from;
    let data = m.data_mut();
    for i in 0..r_to {
        let (i0, i1, wi) = axis(i);
        for j in 0..r_to {
            let (j0, j1, wj) = axis(j);
            let row = &mut data[(i * r_to + j) * cols..(i * r_to + j + 1) * cols];
            row[i0 * r_from + j0] += (1.0 - wi) * (1.0 - wj);
            row[i0 * r_from + j1] += (1.0 - wi) * wj;
            row[i1 * r_from + j0] += wi * (1.0 - wj);
            row[i1 * r_from + j1] += wi * wj;
        }
    }
    m
}

/// Resamples a per-cell embedding table (`r_from^2` rows) to `r_to^2` rows.
pub fn resample_grid_embedding(table: &Tensor, r_from: usize, r_to: usize) -> Result<Tensor> {
    let (rows, d) = table.dims2("resample_grid_embedding")?;
    if rows != r_from * r_from || r_from == 0 || r_to == 0 {
        return Err(Error::shape(
            "resample_grid_embedding",
            &[r_from * r_from, d],
            table.shape(),
        ));
    }
    let w = grid_resample_matrix(r_from, r_to);
    let out = crate::autodiff::kernels::gemm(w.data(), table.data(), r_to * r_to, rows, d);
    Tensor::matrix(r_to * r_to, d, out)
}
