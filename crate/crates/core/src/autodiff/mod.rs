//! A small dense-tensor autodiff engine: a single-use tape, the operator set
//! the completion network needs, Adam, and a finite-difference checker.

mod check;
mod graph;
pub mod kernels;
mod optim;
mod tensor;

pub use check::{grad_check, grad_check_many, DEFAULT_STEP};
pub use graph::{Graph, Var, LAYER_NORM_EPS, PROB_FLOOR};
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
