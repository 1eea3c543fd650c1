//! Minimal dense networks: forward, reverse-mode backward, finite-difference
//! checks and a binary checkpoint format.

mod checkpoint;
pub mod gradcheck;
mod matrix;
mod network;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{gradient_check, GradientReport};
pub use matrix::Matrix;
pub use network::{
    backward_layers, evaluate_layers, fingerprint_layers, forward_layers, Activation, AffineLayer,
    DenseNetwork, ForwardPass, Gradients, Layer, LayerGradient,
};

/// Numerically stable softmax (max-subtracted).
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
