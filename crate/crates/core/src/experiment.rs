//! Cross-validated synthetic benchmark and latent-noise attribution.

use crate::confidence::PredictionRecord;
use crate::data::{kfold_split, synth_generate, Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{metrics, rejection_curve, RejectionCurve, RejectionMode, DEFAULT_REJECTION_RATIOS};
use crate::train::{finetune_classifier, train_backbone, train_uncertainty, TrainConfig, TrainedModel};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub seeds: Vec<u64>,
    pub folds: usize,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub ratios: Vec<f64>,
    pub mode: RejectionMode,
}

impl BenchmarkConfig {
    /// Five seeds, five folds, the standard imbalanced generator.
    pub fn standard() -> Self {
        BenchmarkConfig {
            seeds: (0..5).collect(),
            folds: 5,
            synth: SynthConfig::benchmark(0),
            train: TrainConfig::default(),
            ratios: DEFAULT_REJECTION_RATIOS.to_vec(),
            mode: RejectionMode::Global,
        }
    }
}

/// Held-out predictions of every sample of one seed, indexed by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub baseline: Vec<PredictionRecord>,
    pub pooled: Vec<PredictionRecord>,
    pub baseline_bacc: f64,
    pub pooled_bacc: f64,
    pub rejection: RejectionCurve,
    /// Mean predicted σ² over noise-driven and signal-driven latent dims,
    /// averaged over folds.
    pub noise_var: f64,
    pub signal_var: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub seeds: Vec<SeedOutcome>,
}

impl BenchmarkReport {
    fn mean(&self, f: impl Fn(&SeedOutcome) -> f64) -> f64 {
        self.seeds.iter().map(f).sum::<f64>() / self.seeds.len() as f64
    }

    pub fn mean_baseline_bacc(&self) -> f64 {
        self.mean(|s| s.baseline_bacc)
    }

    pub fn mean_pooled_bacc(&self) -> f64 {
        self.mean(|s| s.pooled_bacc)
    }

    pub fn mean_improvement(&self) -> f64 {
        self.mean(|s| s.pooled_bacc - s.baseline_bacc)
    }

    /// Per-ratio `(ratio, mean acc, mean bacc)` across seeds.
    pub fn mean_rejection(&self) -> Vec<(f64, f64, f64)> {
        let rows = self.seeds.first().map_or(0, |s| s.rejection.rows.len());
        (0..rows)
            .map(|r| {
                (
                    self.seeds[0].rejection.rows[r].ratio,
                    self.mean(|s| s.rejection.rows[r].accuracy),
                    self.mean(|s| s.rejection.rows[r].balanced_accuracy),
                )
            })
            .collect()
    }

    pub fn mean_noise_var(&self) -> f64 {
        self.mean(|s| s.noise_var)
    }

    pub fn mean_signal_var(&self) -> f64 {
        self.mean(|s| s.signal_var)
    }
}

/// Trains stages 1 to 3 on each training fold and predicts the held-out fold
/// with both the stage-1 network and the pooled model.
pub fn run_seed(cfg: &BenchmarkConfig, seed: u64) -> Result<SeedOutcome> {
    let synth = SynthConfig { seed, ..cfg.synth.clone() };
    let dataset = synth_generate(&synth)?;
    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    let n = dataset.len();
    let mut baseline: Vec<Option<PredictionRecord>> = vec![None; n];
    let mut pooled: Vec<Option<PredictionRecord>> = vec![None; n];
    let (mut noise_var, mut signal_var) = (0.0, 0.0);
    let folds = kfold_split(dataset.labels(), cfg.folds, seed)?;
    for fold in &folds {
        let train = dataset.subset(&fold.train)?;
        let stage1 = train_backbone(&train, &train_cfg)?;
        let stage2 = train_uncertainty(stage1, &train)?;
        let split = noise_split(&stage2, &train, synth.signal_dims)?;
        let (nv, sv) = split.group_variances(&stage2, &train)?;
        noise_var += nv;
        signal_var += sv;
        let model = finetune_classifier(stage2, &train)?;
        for &i in &fold.test {
            let label = Some(dataset.labels()[i]);
            let x = dataset.sample(i);
            baseline[i] = Some(model.predict_baseline(x)?.with_sample(i, label));
            pooled[i] = Some(model.predict(x)?.with_sample(i, label));
        }
    }
    let collect = |v: Vec<Option<PredictionRecord>>| -> Vec<PredictionRecord> {
        v.into_iter().map(|r| r.expect("folds cover every sample")).collect()
    };
    let baseline = collect(baseline);
    let pooled = collect(pooled);
    let k = folds.len() as f64;
    Ok(SeedOutcome {
        seed,
        baseline_bacc: metrics(&baseline)?.balanced_accuracy,
        pooled_bacc: metrics(&pooled)?.balanced_accuracy,
        rejection: rejection_curve(&pooled, &cfg.ratios, cfg.mode)?,
        baseline,
        pooled,
        noise_var: noise_var / k,
        signal_var: signal_var / k,
    })
}

pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("benchmark needs at least one seed".into()));
    }
    let seeds = cfg.seeds.iter().map(|&s| run_seed(cfg, s)).collect::<Result<_>>()?;
    Ok(BenchmarkReport { seeds })
}

/// Partition of latent dimensions by how much of their within-class spread
/// comes from the noise inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSplit {
    /// Per latent dim: `E_x Σ_{k noise} J_lk(x)² v_k`, with `v_k` the pooled
    /// within-class variance of input `k` and `J` the trunk Jacobian.
    pub noise_energy: Vec<f64>,
    /// Latent dims in the upper half of `noise_energy`.
    pub noise_driven: Vec<usize>,
    pub signal_driven: Vec<usize>,
}

impl NoiseSplit {
    /// Mean predicted σ² over each group, averaged over the samples.
    pub fn group_variances(&self, model: &TrainedModel, dataset: &Dataset) -> Result<(f64, f64)> {
        let (mut noise, mut signal) = (0.0, 0.0);
        for i in 0..dataset.len() {
            let var = model.embed(dataset.sample(i))?.variance();
            noise += self.noise_driven.iter().map(|&l| var[l]).sum::<f64>() / self.noise_driven.len() as f64;
            signal += self.signal_driven.iter().map(|&l| var[l]).sum::<f64>() / self.signal_driven.len() as f64;
        }
        let n = dataset.len() as f64;
        Ok((noise / n, signal / n))
    }
}

fn within_class_variance(dataset: &Dataset) -> Vec<f64> {
    let (dim, classes) = (dataset.dim(), dataset.class_count());
    let mut mean = vec![vec![0.0; dim]; classes];
    for i in 0..dataset.len() {
        let c = dataset.labels()[i];
        for (m, x) in mean[c].iter_mut().zip(dataset.sample(i)) {
            *m += x / dataset.class_counts()[c] as f64;
        }
    }
    let mut var = vec![0.0; dim];
    for i in 0..dataset.len() {
        let c = dataset.labels()[i];
        for ((v, x), m) in var.iter_mut().zip(dataset.sample(i)).zip(&mean[c]) {
            *v += (x - m).powi(2) / dataset.len() as f64;
        }
    }
    var
}

/// Ranks latent dims by noise energy; inputs at index `signal_dims` and above
/// are the noise inputs. Ties keep the lower index on the signal side.
pub fn noise_split(model: &TrainedModel, dataset: &Dataset, signal_dims: usize) -> Result<NoiseSplit> {
    let latent = model
        .backbone
        .latent_width()
        .ok_or_else(|| Error::Schema("model has no latent layer".into()))?;
    if latent < 2 {
        return Err(Error::Schema("noise attribution needs at least 2 latent dims".into()));
    }
    let v = within_class_variance(dataset);
    let trunk = model.backbone.trunk();
    let mut energy = vec![0.0; latent];
    for i in 0..dataset.len() {
        let pass = crate::nn::forward_layers(trunk, dataset.sample(i))?;
        for (l, e) in energy.iter_mut().enumerate() {
            let mut upstream = vec![0.0; latent];
            upstream[l] = 1.0;
            let jac = crate::nn::backward_layers(trunk, &pass, &upstream)?.input;
            *e += jac[signal_dims..]
                .iter()
                .zip(&v[signal_dims..])
                .map(|(j, vk)| j * j * vk)
                .sum::<f64>()
                / dataset.len() as f64;
        }
    }
    let mut order: Vec<usize> = (0..latent).collect();
    order.sort_by(|&a, &b| energy[a].total_cmp(&energy[b]).then(a.cmp(&b)));
    let half = latent / 2;
    let mut signal_driven = order[..latent - half].to_vec();
    let mut noise_driven = order[latent - half..].to_vec();
    signal_driven.sort_unstable();
    noise_driven.sort_unstable();
    Ok(NoiseSplit {
        noise_energy: energy,
        noise_driven,
        signal_driven,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchmarkConfig {
        let mut cfg = BenchmarkConfig::standard();
        cfg.seeds = vec![3];
        cfg.folds = 2;
        cfg.synth.class_counts = vec![40, 20, 10];
        cfg.train.stage1.epochs = 3;
        cfg.train.stage2.epochs = 3;
        cfg.train.stage3.epochs = 3;
        cfg
    }

    #[test]
    fn every_sample_is_predicted_once() {
        let report = run_benchmark(&small()).unwrap();
        let s = &report.seeds[0];
        assert_eq!(s.pooled.len(), 70);
        for (i, r) in s.pooled.iter().enumerate() {
            assert_eq!(r.sample_id, i);
            assert!(r.true_label.is_some());
        }
        assert_eq!(s.rejection.rows.len(), 4);
        assert_eq!(s.rejection.rows[0].retained, 70);
        assert_eq!(report.mean_rejection()[3].0, 0.20);
    }

    #[test]
    fn benchmark_is_deterministic() {
        assert_eq!(run_benchmark(&small()).unwrap(), run_benchmark(&small()).unwrap());
    }

    #[test]
    fn split_halves_latent_dims() {
        let cfg = small();
        let data = synth_generate(&cfg.synth).unwrap();
        let model = train_backbone(&data, &cfg.train).unwrap();
        let split = noise_split(&model, &data, cfg.synth.signal_dims).unwrap();
        assert_eq!(split.noise_driven.len(), 4);
        assert_eq!(split.signal_driven.len(), 4);
        let min_noise = split.noise_driven.iter().map(|&l| split.noise_energy[l]).fold(f64::INFINITY, f64::min);
        let max_signal = split.signal_driven.iter().map(|&l| split.noise_energy[l]).fold(0.0, f64::max);
        assert!(min_noise >= max_signal);
    }
}
