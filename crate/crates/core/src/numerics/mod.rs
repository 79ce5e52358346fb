//! Dense tensors, a reverse-mode tape, Adam, and a finite-difference checker.

mod adam;
mod gradcheck;
mod graph;
mod scalar;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::{grad_check, GRAD_CHECK_STEP};
pub use graph::{Grads, Graph, Var, MASK_VALUE};
pub use scalar::Scalar;
pub use tensor::{ParamSet, Tensor};

use crate::error::Result;

/// Softmax of `logits + additive_mask`, stabilized by max-subtraction.
pub fn masked_softmax<F: Scalar>(logits: &[F], additive_mask: &[F]) -> Result<Vec<F>> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[logits.len()], logits.to_vec())?);
    let y = g.masked_softmax(x, additive_mask, 1)?;
    Ok(g.value(y).to_vec())
}

/// `gain * (x - mean) / sqrt(var + eps) + bias` over a single vector.
pub fn layer_norm<F: Scalar>(x: &[F], gain: &[F], bias: &[F], eps: F) -> Vec<F> {
    let n = x.len();
    let mut g = Graph::new();
    let xv = g.constant(Tensor::new(&[1, n], x.to_vec()).expect("row"));
    let gv = g.constant(Tensor::new(&[n], gain.to_vec()).expect("gain width"));
    let bv = g.constant(Tensor::new(&[n], bias.to_vec()).expect("bias width"));
    let y = g.layer_norm(xv, gv, bv, eps);
    g.value(y).to_vec()
}

/// GELU with the tanh approximation.
pub fn gelu<F: Scalar>(x: F) -> F {
    graph::gelu(x)
}
