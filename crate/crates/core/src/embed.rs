//! Gaussian latent embeddings and the mutual likelihood score between them.
//!
//! Each sample is embedded as a diagonal Gaussian `N(μ, diag σ²)`. For two
//! embeddings the probability that they coincide is the density of
//! `Δz = z_i − z_j ~ N(μ_i − μ_j, σ_i² + σ_j²)` at zero. Its logarithm is the
//! mutual likelihood score, and its negated mean over same-class pairs is the
//! loss that trains the variance head.

use std::f64::consts::PI;

use crate::error::{Error, Result};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Diagonal Gaussian embedding parameterised by `μ` and `ln σ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEmbedding {
    mu: Vec<f64>,
    log_var: Vec<f64>,
}

impl GaussianEmbedding {
    /// `log_var` is clamped to `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.len() != log_var.len() {
            return Err(Error::Shape(format!(
                "mean has {} dims, log-variance has {}",
                mu.len(),
                log_var.len()
            )));
        }
        if mu.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite embedding parameter".into()));
        }
        let log_var = log_var
            .into_iter()
            .map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
            .collect();
        Ok(GaussianEmbedding { mu, log_var })
    }

    pub fn from_variance(mu: Vec<f64>, var: &[f64]) -> Result<Self> {
        if var.iter().any(|&v| v <= 0.0) {
            return Err(Error::Range("variance must be positive".into()));
        }
        GaussianEmbedding::new(mu, var.iter().map(|v| v.ln()).collect())
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }
}

/// Whether a raw network output lies strictly inside the clamp range, i.e.
/// whether the clamp passes gradient through.
pub fn log_var_unclamped(raw: f64) -> bool {
    raw > LOG_VAR_MIN && raw < LOG_VAR_MAX
}

/// Per-dimension distribution of `z_i − z_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaDistribution {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn check_dims(a: &GaussianEmbedding, b: &GaussianEmbedding) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "embedding dims {} and {} differ",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

pub fn delta_distribution(a: &GaussianEmbedding, b: &GaussianEmbedding) -> Result<DeltaDistribution> {
    check_dims(a, b)?;
    let mean = a.mu.iter().zip(&b.mu).map(|(x, y)| x - y).collect();
    let var = a
        .log_var
        .iter()
        .zip(&b.log_var)
        .map(|(x, y)| x.exp() + y.exp())
        .collect();
    Ok(DeltaDistribution { mean, var })
}

/// Mutual likelihood score
/// `R = −½ Σ_l [(μ_i−μ_j)²/(σ_i²+σ_j²) + ln(σ_i²+σ_j²)] − (D/2) ln 2π`.
pub fn mls_score(a: &GaussianEmbedding, b: &GaussianEmbedding) -> Result<f64> {
    check_dims(a, b)?;
    Ok(mls_unchecked(a, b))
}

fn mls_unchecked(a: &GaussianEmbedding, b: &GaussianEmbedding) -> f64 {
    let mut acc = 0.0;
    for l in 0..a.dim() {
        let d = a.mu[l] - b.mu[l];
        let s = a.log_var[l].exp() + b.log_var[l].exp();
        acc += d * d / s + s.ln();
    }
    -0.5 * acc - 0.5 * a.dim() as f64 * (2.0 * PI).ln()
}

/// Reference value of `∫ N(z; μ_i, σ_i²) N(z; μ_j, σ_j²) dz` for one-dimensional
/// embeddings by composite Simpson quadrature on 20 001 nodes over
/// `[min μ − 20σ_max, max μ + 20σ_max]`. Independent of [`mls_score`].
pub fn mls_quadrature_oracle(a: &GaussianEmbedding, b: &GaussianEmbedding) -> Result<f64> {
    if a.dim() != 1 || b.dim() != 1 {
        return Err(Error::Shape("quadrature oracle needs one-dimensional embeddings".into()));
    }
    const INTERVALS: usize = 20_000;
    let (m1, v1) = (a.mu[0], a.log_var[0].exp());
    let (m2, v2) = (b.mu[0], b.log_var[0].exp());
    let sd_max = v1.max(v2).sqrt();
    let lo = m1.min(m2) - 20.0 * sd_max;
    let hi = m1.max(m2) + 20.0 * sd_max;
    let density = |z: f64, m: f64, v: f64| (-(z - m) * (z - m) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt();
    let f = |z: f64| density(z, m1, v1) * density(z, m2, v2);
    let h = (hi - lo) / INTERVALS as f64;
    let mut sum = f(lo) + f(hi);
    for i in 1..INTERVALS {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(lo + i as f64 * h);
    }
    Ok(sum * h / 3.0)
}

/// Unordered index pairs `(i, j)`, `i < j`, whose labels agree.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GenuinePairSet {
    pairs: Vec<(usize, usize)>,
}

impl GenuinePairSet {
    /// Validates that each pair is ordered, same-label, and unique.
    pub fn new(pairs: Vec<(usize, usize)>, labels: &[usize]) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for &(i, j) in &pairs {
            if i >= j || j >= labels.len() {
                return Err(Error::Range(format!("invalid pair ({i}, {j})")));
            }
            if labels[i] != labels[j] {
                return Err(Error::Schema(format!("pair ({i}, {j}) mixes labels")));
            }
            if !seen.insert((i, j)) {
                return Err(Error::Schema(format!("duplicate pair ({i}, {j})")));
            }
        }
        Ok(GenuinePairSet { pairs })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn enumerate_genuine_pairs(labels: &[usize]) -> GenuinePairSet {
    let mut pairs = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if labels[i] == labels[j] {
                pairs.push((i, j));
            }
        }
    }
    GenuinePairSet { pairs }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss {
    pub loss: f64,
    /// `∂loss/∂μ` per embedding.
    pub grad_mu: Vec<Vec<f64>>,
    /// `∂loss/∂ln σ²` per embedding.
    pub grad_log_var: Vec<Vec<f64>>,
}

/// Mean of `−R(z_i, z_j)` over the genuine pairs, with analytic gradients.
pub fn pair_loss(embeddings: &[GaussianEmbedding], pairs: &GenuinePairSet) -> Result<PairLoss> {
    if pairs.is_empty() {
        return Err(Error::NoGenuinePairs);
    }
    let dim = embeddings.first().map_or(0, GaussianEmbedding::dim);
    if embeddings.iter().any(|e| e.dim() != dim) {
        return Err(Error::Shape("embeddings have mixed dimensions".into()));
    }
    if let Some(&(_, j)) = pairs.pairs().iter().find(|&&(_, j)| j >= embeddings.len()) {
        return Err(Error::Range(format!("pair index {j} with {} embeddings", embeddings.len())));
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut grad_mu = vec![vec![0.0; dim]; embeddings.len()];
    let mut grad_log_var = vec![vec![0.0; dim]; embeddings.len()];
    let mut loss = 0.0;
    for &(i, j) in pairs.pairs() {
        let (a, b) = (&embeddings[i], &embeddings[j]);
        loss -= mls_unchecked(a, b);
        for l in 0..dim {
            let d = a.mu[l] - b.mu[l];
            let (va, vb) = (a.log_var[l].exp(), b.log_var[l].exp());
            let s = va + vb;
            // −R = ½(d²/s + ln s) + const
            let dmu = d / s;
            let ds = 0.5 * (1.0 / s - d * d / (s * s));
            grad_mu[i][l] += scale * dmu;
            grad_mu[j][l] -= scale * dmu;
            grad_log_var[i][l] += scale * ds * va;
            grad_log_var[j][l] += scale * ds * vb;
        }
    }
    Ok(PairLoss {
        loss: loss * scale,
        grad_mu,
        grad_log_var,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{compare_gradients, numerical_gradient};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn e1(mu: f64, var: f64) -> GaussianEmbedding {
        GaussianEmbedding::from_variance(vec![mu], &[var]).unwrap()
    }

    #[test]
    fn clamp_bounds_log_variance() {
        let e = GaussianEmbedding::new(vec![0.0, 0.0], vec![-50.0, 50.0]).unwrap();
        assert_eq!(e.log_var(), &[LOG_VAR_MIN, LOG_VAR_MAX]);
        assert!(GaussianEmbedding::new(vec![0.0], vec![]).is_err());
    }

    #[test]
    fn delta_examples() {
        let a = e1(1.0, 0.3);
        let b = e1(0.0, 0.7);
        let d = delta_distribution(&a, &b).unwrap();
        assert_abs_diff_eq!(d.mean[0], 1.0);
        assert_abs_diff_eq!(d.var[0], 1.0, epsilon = 1e-15);

        let same = delta_distribution(&a, &a).unwrap();
        assert_eq!(same.mean[0], 0.0);
        assert_abs_diff_eq!(same.var[0], 0.6, epsilon = 1e-15);

        let swapped = delta_distribution(&b, &a).unwrap();
        assert_eq!(swapped.mean[0], -d.mean[0]);
        assert_eq!(swapped.var[0], d.var[0]);

        let two = GaussianEmbedding::new(vec![0.0; 2], vec![0.0; 2]).unwrap();
        assert!(matches!(delta_distribution(&a, &two), Err(Error::Shape(_))));
    }

    #[test]
    fn score_examples() {
        let r = mls_score(&e1(0.0, 0.5), &e1(0.0, 0.5)).unwrap();
        assert_abs_diff_eq!(r, -0.9189385, epsilon = 1e-7);
        let r = mls_score(&e1(1.0, 0.5), &e1(0.0, 0.5)).unwrap();
        assert_abs_diff_eq!(r, -1.4189385, epsilon = 1e-7);
        assert_abs_diff_eq!(r.exp(), 0.2419707, epsilon = 1e-7);
    }

    #[test]
    fn quadrature_examples() {
        let s = mls_quadrature_oracle(&e1(0.0, 0.5), &e1(0.0, 0.5)).unwrap();
        assert_abs_diff_eq!(s, 1.0 / (2.0 * PI).sqrt(), epsilon = 1e-9);
        let s = mls_quadrature_oracle(&e1(1.0, 0.5), &e1(0.0, 0.5)).unwrap();
        assert_abs_diff_eq!(s, 0.2419707, epsilon = 1e-7);
        let mut prev = f64::INFINITY;
        for k in 0..12 {
            let s = mls_quadrature_oracle(&e1(k as f64, 0.5), &e1(0.0, 0.5)).unwrap();
            assert!(s < prev);
            prev = s;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn pair_loss_examples() {
        let same = vec![e1(0.0, 0.5), e1(0.0, 0.5)];
        let pairs = enumerate_genuine_pairs(&[0, 0]);
        assert_abs_diff_eq!(pair_loss(&same, &pairs).unwrap().loss, 0.9189385, epsilon = 1e-7);

        let three = vec![e1(1.0, 0.5), e1(0.0, 0.5), e1(0.0, 0.5)];
        let pairs = GenuinePairSet::new(vec![(0, 1), (1, 2)], &[0, 0, 0]).unwrap();
        assert_abs_diff_eq!(pair_loss(&three, &pairs).unwrap().loss, 1.1689385, epsilon = 1e-7);

        assert!(matches!(
            pair_loss(&three, &GenuinePairSet::default()),
            Err(Error::NoGenuinePairs)
        ));
    }

    #[test]
    fn pair_enumeration() {
        assert_eq!(enumerate_genuine_pairs(&[0, 0, 1]).pairs(), &[(0, 1)]);
        assert!(enumerate_genuine_pairs(&[0, 1, 2]).is_empty());
        assert_eq!(
            enumerate_genuine_pairs(&[0, 0, 0]).pairs(),
            &[(0, 1), (0, 2), (1, 2)]
        );
    }

    #[test]
    fn pair_set_validation() {
        assert!(GenuinePairSet::new(vec![(0, 1)], &[0, 1]).is_err());
        assert!(GenuinePairSet::new(vec![(1, 0)], &[0, 0]).is_err());
        assert!(GenuinePairSet::new(vec![(0, 1), (0, 1)], &[0, 0]).is_err());
    }

    #[test]
    fn pair_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (n, dim) = (5, 3);
        let labels = [0, 1, 0, 0, 1];
        let pairs = enumerate_genuine_pairs(&labels);
        let mut params: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        params.extend((0..n * dim).map(|_| rng.gen_range(-1.5..1.5)));
        let build = |p: &[f64]| -> Vec<GaussianEmbedding> {
            (0..n)
                .map(|i| {
                    GaussianEmbedding::new(
                        p[i * dim..(i + 1) * dim].to_vec(),
                        p[n * dim + i * dim..n * dim + (i + 1) * dim].to_vec(),
                    )
                    .unwrap()
                })
                .collect()
        };
        let out = pair_loss(&build(&params), &pairs).unwrap();
        let mut analytic: Vec<f64> = out.grad_mu.concat();
        analytic.extend(out.grad_log_var.concat());
        let numeric = numerical_gradient(|p| pair_loss(&build(p), &pairs).unwrap().loss, &params, 1e-5).unwrap();
        let report = compare_gradients(&analytic, &numeric, 1e-4);
        assert!(report.passed, "{report:?}");
    }

    proptest! {
        #[test]
        fn score_is_symmetric(
            mu in prop::collection::vec(-3.0f64..3.0, 6),
            lv in prop::collection::vec(-4.0f64..4.0, 6),
        ) {
            let a = GaussianEmbedding::new(mu[..3].to_vec(), lv[..3].to_vec()).unwrap();
            let b = GaussianEmbedding::new(mu[3..].to_vec(), lv[3..].to_vec()).unwrap();
            prop_assert_eq!(mls_score(&a, &b).unwrap(), mls_score(&b, &a).unwrap());
        }

        #[test]
        fn score_decreases_with_distance(d1 in 0.0f64..3.0, extra in 0.01f64..3.0, lv in -3.0f64..3.0) {
            let base = GaussianEmbedding::new(vec![0.0, 0.2], vec![lv, 0.1]).unwrap();
            let near = GaussianEmbedding::new(vec![d1, 0.2], vec![lv, 0.1]).unwrap();
            let far = GaussianEmbedding::new(vec![d1 + extra, 0.2], vec![lv, 0.1]).unwrap();
            prop_assert!(mls_score(&base, &near).unwrap() > mls_score(&base, &far).unwrap());
        }
    }
}
