//! Central finite-difference verification of analytic gradients.

use super::network::DenseNetwork;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Probe points with a relu pre-activation closer than this to zero are rejected.
pub const KINK_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    /// Largest `|analytic − numeric| / max(1, |numeric|)`.
    pub worst_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Central differences of `f` at `point`.
pub fn numerical_gradient<F>(mut f: F, point: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for k in 0..point.len() {
        probe[k] = point[k] + step;
        let plus = f(&probe);
        probe[k] = point[k] - step;
        let minus = f(&probe);
        probe[k] = point[k];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss probing coordinate {k}")));
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

pub fn compare_gradients(analytic: &[f64], numeric: &[f64], tolerance: f64) -> GradientReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let mut worst_error = 0.0;
    let mut worst_index = None;
    for (k, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let err = relative_error(a, n);
        if err > worst_error || err.is_nan() {
            worst_error = err;
            worst_index = Some(k);
        }
    }
    GradientReport {
        worst_error,
        worst_index,
        checked: analytic.len(),
        tolerance,
        passed: worst_error < tolerance,
    }
}

/// Checks backpropagated gradients of `loss ∘ net` at `x` against central
/// differences over every parameter and every input coordinate (parameters
/// first, then inputs).
///
/// `loss` maps network outputs to `(value, ∂value/∂outputs)`.
pub fn gradient_check<L>(
    net: &DenseNetwork,
    loss: L,
    x: &[f64],
    tolerance: f64,
) -> Result<GradientReport>
where
    L: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let pass = net.forward(x)?;
    let margin = pass.min_relu_margin(net.layers());
    if margin < KINK_MARGIN {
        return Err(Error::NearKink { margin: KINK_MARGIN });
    }
    let (value, upstream) = loss(pass.output());
    if !value.is_finite() {
        return Err(Error::Numeric("loss is not finite at the probe point".into()));
    }
    let grads = net.backward(&pass, &upstream)?;
    let mut analytic: Vec<f64> = grads.params().copied().collect();
    analytic.extend_from_slice(&grads.input);

    let eval = |n: &DenseNetwork, input: &[f64]| -> f64 {
        n.forward(input).map_or(f64::NAN, |p| loss(p.output()).0)
    };
    let params: Vec<f64> = net.params().copied().collect();
    let mut scratch = net.clone();
    let mut numeric = numerical_gradient(
        |p| {
            for (dst, src) in scratch.params_mut().zip(p) {
                *dst = *src;
            }
            eval(&scratch, x)
        },
        &params,
        DEFAULT_STEP,
    )?;
    numeric.extend(numerical_gradient(|xi| eval(net, xi), x, DEFAULT_STEP)?);
    Ok(compare_gradients(&analytic, &numeric, tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{softmax, Activation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sum_of_squares(out: &[f64]) -> (f64, Vec<f64>) {
        (
            out.iter().map(|v| v * v).sum::<f64>() * 0.5,
            out.to_vec(),
        )
    }

    #[test]
    fn numerical_gradient_of_quadratic() {
        let g = numerical_gradient(|p| p[0] * p[0] + 3.0 * p[1], &[2.0, 5.0], 1e-5).unwrap();
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn random_two_layer_net_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = DenseNetwork::glorot(
            &[4, 6, 3],
            &[Activation::Relu, Activation::Identity],
            0,
            &mut rng,
        )
        .unwrap();
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |out: &[f64]| {
            let p = softmax(out);
            let mut g = p.clone();
            g[1] -= 1.0;
            (-p[1].ln(), g)
        };
        let report = gradient_check(&net, loss, &x, DEFAULT_TOLERANCE).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.checked, net.param_count() + 4);
    }

    #[test]
    fn zero_parameter_net_is_vacuous_pass() {
        let net = DenseNetwork::new(vec![], 0).unwrap();
        let report = gradient_check(&net, sum_of_squares, &[], DEFAULT_TOLERANCE).unwrap();
        assert!(report.passed);
        assert_eq!(report.checked, 0);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let analytic = vec![1.0, -2.0, 0.5];
        let mut bad = analytic.clone();
        bad[1] += 0.1;
        assert!(compare_gradients(&analytic, &analytic, 1e-4).passed);
        let report = compare_gradients(&bad, &analytic, 1e-4);
        assert!(!report.passed);
        assert_eq!(report.worst_index, Some(1));
    }

    #[test]
    fn non_finite_loss_is_numeric_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = DenseNetwork::glorot(&[2, 2], &[Activation::Identity], 0, &mut rng).unwrap();
        let loss = |_: &[f64]| (f64::NAN, vec![0.0, 0.0]);
        assert!(matches!(
            gradient_check(&net, loss, &[0.1, 0.2], 1e-4),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn kink_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = DenseNetwork::glorot(&[2, 2], &[Activation::Relu], 0, &mut rng).unwrap();
        // zero bias and zero input put every unit exactly on the kink
        assert!(matches!(
            gradient_check(&net, sum_of_squares, &[0.0, 0.0], 1e-4),
            Err(Error::NearKink { .. })
        ));
    }
}
