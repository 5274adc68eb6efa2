//! Dense `f64` tensors, a reverse-mode tape, and the Adam optimizer.
//!
//! The tape records tensor-level operations (linear layers, activations,
//! elementwise arithmetic, reductions) and replays them in reverse for
//! gradients. Accumulation order is fixed and single-threaded, so repeated
//! runs produce bit-identical results.

mod adam;
mod gradcheck;
mod mlp;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use mlp::{forward, forward_on_tape, Activation, Layer, MlpBinding, MlpGrads, MlpParams};
pub use tape::{Gradients, NodeId, Tape};
pub(crate) use tape::log_sum_exp;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("shape mismatch in {op}: {context}")]
    ShapeMismatch { op: &'static str, context: String },
    #[error("{op} requires a matrix, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("backward requires a scalar output node, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("non-finite value produced by {op} (node {node})")]
    NonFiniteValue { op: &'static str, node: usize },
    #[error("non-finite gradient at node {node} ({op})")]
    NonFiniteGradient { op: &'static str, node: usize },
    #[error("non-finite gradient for {name}")]
    NonFiniteParamGradient { name: String },
    #[error("optimizer state incompatible with parameters: {context}")]
    OptimizerMismatch { context: String },
    #[error("dropout rate {rate} outside [0, 1)")]
    BadDropoutRate { rate: f64 },
    #[error("invalid network architecture: {context}")]
    BadArchitecture { context: String },
    #[error("node {node} does not belong to this tape (len {len})")]
    UnknownNode { node: usize, len: usize },
}

/// Dot product with a fixed four-lane accumulation pattern.
///
/// The split keeps the order deterministic while letting the compiler keep
/// four independent FP chains in flight.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let k = 4 * c;
        s0 += a[k] * b[k];
        s1 += a[k + 1] * b[k + 1];
        s2 += a[k + 2] * b[k + 2];
        s3 += a[k + 3] * b[k + 3];
    }
    let mut tail = 0.0;
    for k in 4 * chunks..a.len() {
        tail += a[k] * b[k];
    }
    (s0 + s1) + (s2 + s3) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_order_free_sum() {
        let a: Vec<f64> = (0..11).map(|i| 0.3 * i as f64 - 1.0).collect();
        let b: Vec<f64> = (0..11).map(|i| 0.7 - 0.2 * i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        approx::assert_abs_diff_eq!(dot(&a, &b), naive, epsilon = 1e-12);
    }

    #[test]
    fn dot_is_deterministic() {
        let a = vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7];
        let b = vec![1.0, 2.0, -3.0, 4.0, 5.0, -6.0, 7.0];
        assert_eq!(dot(&a, &b).to_bits(), dot(&a, &b).to_bits());
    }
}
