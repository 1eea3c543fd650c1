//! Confidence pooling of latent features and closed-form propagation of the
//! latent Gaussian through affine decision layers.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embed::GaussianEmbedding;
use crate::error::{Error, Result};
use crate::nn::{evaluate_layers, Activation, AffineLayer, Layer};

/// Variance floor used when turning a score variance into a confidence.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Latent mean re-weighted by normalised inverse variance.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature {
    pub mu_hat: Vec<f64>,
    /// `q_n = c_n / max_j c_j` with `c_n = 1/σ_n²`.
    pub q: Vec<f64>,
    /// Variance of `μ̂` with `q` held constant: `(q_n/Σq)² σ_n²`.
    pub pooled_var: Vec<f64>,
}

pub fn confidence_pool(embedding: &GaussianEmbedding) -> Result<PooledFeature> {
    if embedding.dim() == 0 {
        return Err(Error::Shape("cannot pool an empty embedding".into()));
    }
    // c_n / max c = exp(min lv − lv_n), computed in log space
    let min_lv = embedding
        .log_var()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let q: Vec<f64> = embedding
        .log_var()
        .iter()
        .map(|lv| (min_lv - lv).exp())
        .collect();
    let total: f64 = q.iter().sum();
    let mu_hat = q
        .iter()
        .zip(embedding.mu())
        .map(|(qn, mn)| qn * mn / total)
        .collect();
    let pooled_var = q
        .iter()
        .zip(embedding.log_var())
        .map(|(qn, lv)| (qn / total).powi(2) * lv.exp())
        .collect();
    Ok(PooledFeature {
        mu_hat,
        q,
        pooled_var,
    })
}

/// Moments of `W z + b` for independent Gaussian `z`.
pub fn propagate_affine(mean: &[f64], var: &[f64], layer: &AffineLayer) -> Result<(Vec<f64>, Vec<f64>)> {
    if mean.len() != var.len() || mean.len() != layer.inputs() {
        return Err(Error::Shape(format!(
            "mean width {}, variance width {}, layer input {}",
            mean.len(),
            var.len(),
            layer.inputs()
        )));
    }
    let out_mean = layer.apply(mean)?;
    let out_var = (0..layer.outputs())
        .map(|i| {
            layer
                .weights
                .row(i)
                .iter()
                .zip(var)
                .map(|(a, v)| a * a * v)
                .sum()
        })
        .collect();
    Ok((out_mean, out_var))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PropagationMode {
    /// Only affine (identity-activation) head layers are accepted.
    #[default]
    Strict,
    /// Means follow the exact forward; variances follow the affine rule
    /// ignoring relu. Results are flagged approximate.
    MeanPass,
}

/// Per-sample class-score distribution and the derived decision.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub sample_id: usize,
    pub score_mean: Vec<f64>,
    pub score_var: Vec<f64>,
    pub predicted_class: usize,
    /// `1 / max(score_var[predicted_class], VARIANCE_FLOOR)`.
    pub confidence: f64,
    pub true_label: Option<usize>,
    /// Set when a nonlinear head made the variance an approximation.
    pub approximate: bool,
}

impl PredictionRecord {
    pub fn from_moments(score_mean: Vec<f64>, score_var: Vec<f64>) -> Self {
        let predicted_class = argmax(&score_mean);
        let top_var = score_var.get(predicted_class).copied().unwrap_or(0.0);
        PredictionRecord {
            sample_id: 0,
            predicted_class,
            confidence: confidence_from_variance(top_var),
            score_mean,
            score_var,
            true_label: None,
            approximate: false,
        }
    }

    pub fn with_sample(mut self, sample_id: usize, true_label: Option<usize>) -> Self {
        self.sample_id = sample_id;
        self.true_label = true_label;
        self
    }

    pub fn classes(&self) -> usize {
        self.score_mean.len()
    }

    pub fn is_correct(&self) -> Option<bool> {
        self.true_label.map(|t| t == self.predicted_class)
    }
}

pub fn confidence_from_variance(var: f64) -> f64 {
    1.0 / var.max(VARIANCE_FLOOR)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Pushes `(μ̂, pooled variance)` through the head layer by layer.
pub fn propagate_network(
    pooled: &PooledFeature,
    head: &[Layer],
    mode: PropagationMode,
) -> Result<PredictionRecord> {
    let mut mean = pooled.mu_hat.clone();
    let mut var = pooled.pooled_var.clone();
    let mut approximate = false;
    for (idx, layer) in head.iter().enumerate() {
        if layer.activation != Activation::Identity {
            match mode {
                PropagationMode::Strict => return Err(Error::UnsupportedHead { layer: idx }),
                PropagationMode::MeanPass => approximate = true,
            }
        }
        let (m, v) = propagate_affine(&mean, &var, &layer.affine)?;
        mean = m.into_iter().map(|z| layer.activation.apply(z)).collect();
        var = v;
    }
    let mut record = PredictionRecord::from_moments(mean, var);
    record.approximate = approximate;
    Ok(record)
}

/// Empirical output moments of the head under Gaussian input draws.
#[derive(Debug, Clone, PartialEq)]
pub struct McMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Standard error of each mean estimate.
    pub mean_se: Vec<f64>,
    /// Standard error of each variance estimate, `√((m₄ − s⁴)/n)`.
    pub var_se: Vec<f64>,
    pub samples: usize,
}

pub const MC_MIN_SAMPLES: usize = 10_000;

/// Monte-Carlo reference for [`propagate_network`]: draws
/// `z_n ~ N(μ̂_n, pooled_var_n)` independently and runs the exact head forward.
pub fn mc_propagation_oracle(
    pooled: &PooledFeature,
    head: &[Layer],
    samples: usize,
    seed: u64,
) -> Result<McMoments> {
    if samples < MC_MIN_SAMPLES {
        return Err(Error::Range(format!(
            "Monte-Carlo oracle needs at least {MC_MIN_SAMPLES} samples, got {samples}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd: Vec<f64> = pooled.pooled_var.iter().map(|v| v.sqrt()).collect();
    let width = evaluate_layers(head, &pooled.mu_hat)?.len();
    let mut outputs = Vec::with_capacity(samples * width);
    let mut z = vec![0.0; pooled.mu_hat.len()];
    for _ in 0..samples {
        for ((zn, m), s) in z.iter_mut().zip(&pooled.mu_hat).zip(&sd) {
            let e: f64 = StandardNormal.sample(&mut rng);
            *zn = m + s * e;
        }
        outputs.extend(evaluate_layers(head, &z)?);
    }
    let n = samples as f64;
    let mut mean = vec![0.0; width];
    for row in outputs.chunks(width) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut m2 = vec![0.0; width];
    let mut m4 = vec![0.0; width];
    for row in outputs.chunks(width) {
        for c in 0..width {
            let d = row[c] - mean[c];
            let d2 = d * d;
            m2[c] += d2;
            m4[c] += d2 * d2;
        }
    }
    let var: Vec<f64> = m2.iter().map(|s| s / (n - 1.0)).collect();
    let mean_se = var.iter().map(|v| (v / n).sqrt()).collect();
    let var_se = m4
        .iter()
        .zip(&m2)
        .map(|(s4, s2)| {
            let c2 = s2 / n;
            ((s4 / n - c2 * c2).max(0.0) / n).sqrt()
        })
        .collect();
    Ok(McMoments {
        mean,
        var,
        mean_se,
        var_se,
        samples,
    })
}

/// Writes records as CSV:
/// `sample_id,true_label,predicted_class,confidence,mean_0..mean_{C-1},var_0..var_{C-1}`.
/// A missing true label is an empty field.
pub fn write_predictions_csv<W: Write>(records: &[PredictionRecord], out: W) -> Result<()> {
    let classes = records.first().map_or(0, PredictionRecord::classes);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "sample_id".to_string(),
        "true_label".into(),
        "predicted_class".into(),
        "confidence".into(),
    ];
    header.extend((0..classes).map(|c| format!("mean_{c}")));
    header.extend((0..classes).map(|c| format!("var_{c}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        if r.classes() != classes {
            return Err(Error::Shape("records disagree on class count".into()));
        }
        let mut row = vec![
            r.sample_id.to_string(),
            r.true_label.map(|t| t.to_string()).unwrap_or_default(),
            r.predicted_class.to_string(),
            r.confidence.to_string(),
        ];
        row.extend(r.score_mean.iter().map(f64::to_string));
        row.extend(r.score_var.iter().map(f64::to_string));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions_csv<R: Read>(input: R) -> Result<Vec<PredictionRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers().map_err(csv_err)?.clone();
    if header.len() < 4 || (header.len() - 4) % 2 != 0 || &header[0] != "sample_id" {
        return Err(Error::Parse {
            line: 1,
            message: "unexpected prediction header".into(),
        });
    }
    let classes = (header.len() - 4) / 2;
    let mut records = Vec::new();
    for (idx, row) in rd.records().enumerate() {
        let line = idx + 2;
        let row = row.map_err(csv_err)?;
        let parse_f = |s: &str| {
            s.parse::<f64>().map_err(|e| Error::Parse {
                line,
                message: format!("{s:?}: {e}"),
            })
        };
        let parse_u = |s: &str| {
            s.parse::<usize>().map_err(|e| Error::Parse {
                line,
                message: format!("{s:?}: {e}"),
            })
        };
        let true_label = match &row[1] {
            "" => None,
            s => Some(parse_u(s)?),
        };
        let score_mean = (0..classes).map(|c| parse_f(&row[4 + c])).collect::<Result<_>>()?;
        let score_var = (0..classes)
            .map(|c| parse_f(&row[4 + classes + c]))
            .collect::<Result<_>>()?;
        records.push(PredictionRecord {
            sample_id: parse_u(&row[0])?,
            true_label,
            predicted_class: parse_u(&row[2])?,
            confidence: parse_f(&row[3])?,
            score_mean,
            score_var,
            approximate: false,
        });
    }
    Ok(records)
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}
