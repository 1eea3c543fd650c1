//! Joint classification and uncertainty estimation with Gaussian latent
//! embeddings.
//!
//! A dense backbone produces the latent mean `μ`; a separate head estimates
//! `ln σ²` per latent dimension, trained so that same-class samples have a
//! high mutual likelihood. Features are re-weighted by normalised inverse
//! variance before the classifier, and the latent variance is pushed through
//! the classifier in closed form to give a per-prediction confidence used for
//! rejection.

pub mod confidence;
pub mod data;
pub mod embed;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
