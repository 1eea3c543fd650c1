//! Class-imbalance-weighted cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest probability fed to the logarithm.
pub const PROB_FLOOR: f64 = 1e-300;

/// Per-class weights `n_c = (N / N_c)^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    weights: Vec<f64>,
    k: f64,
    total: usize,
    counts: Vec<usize>,
}

impl ClassWeights {
    pub fn new(counts: &[usize], k: f64) -> Result<Self> {
        if !(k >= 0.0 && k.is_finite()) {
            return Err(Error::Config(format!("balance exponent k must be >= 0, got {k}")));
        }
        if let Some(class) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyClass { class });
        }
        let total: usize = counts.iter().sum();
        let weights = counts
            .iter()
            .map(|&c| (total as f64 / c as f64).powf(k))
            .collect();
        Ok(ClassWeights {
            weights,
            k,
            total,
            counts: counts.to_vec(),
        })
    }

    /// All weights equal to one.
    pub fn uniform(classes: usize) -> Self {
        ClassWeights {
            weights: vec![1.0; classes],
            k: 0.0,
            total: classes,
            counts: vec![1; classes],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, class: usize) -> f64 {
        self.weights[class]
    }

    pub fn exponent(&self) -> f64 {
        self.k
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn classes(&self) -> usize {
        self.weights.len()
    }
}

pub fn compute_class_weights(counts: &[usize], k: f64) -> Result<ClassWeights> {
    ClassWeights::new(counts, k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCe {
    pub loss: f64,
    /// Gradient wrt the pre-softmax scores.
    pub grad: Vec<f64>,
    /// The true-class probability fell below [`PROB_FLOOR`] and was clamped.
    pub saturated: bool,
}

/// `−n_t · ln p_t` for softmax probabilities `probs` and true class `t`.
pub fn weighted_ce(probs: &[f64], true_class: usize, weights: &ClassWeights) -> Result<WeightedCe> {
    if probs.len() != weights.classes() {
        return Err(Error::Shape(format!(
            "{} probabilities for {} classes",
            probs.len(),
            weights.classes()
        )));
    }
    if true_class >= probs.len() {
        return Err(Error::Range(format!(
            "class {true_class} with only {} classes",
            probs.len()
        )));
    }
    let n_t = weights.weight(true_class);
    let p_t = probs[true_class];
    let saturated = p_t <= PROB_FLOOR;
    let loss = -n_t * p_t.max(PROB_FLOOR).ln();
    let grad = probs
        .iter()
        .enumerate()
        .map(|(c, &p)| n_t * (p - if c == true_class { 1.0 } else { 0.0 }))
        .collect();
    Ok(WeightedCe {
        loss,
        grad,
        saturated,
    })
}
