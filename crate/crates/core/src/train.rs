//! Staged training.
//!
//! 1. Backbone and classifier are fit with class-weighted cross-entropy.
//! 2. With the backbone frozen, the uncertainty head is fit to minimise the
//!    negative mutual likelihood score over same-class pairs in each batch.
//! 3. Optionally, the classifier is re-fit on confidence-pooled features with
//!    everything else frozen.

use std::fs;
use std::path::{Path, PathBuf};

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use serde::{Deserialize, Serialize};

use crate::confidence::{confidence_pool, propagate_network, PooledFeature, PredictionRecord, PropagationMode};
use crate::data::Dataset;
use crate::embed::{enumerate_genuine_pairs, log_var_unclamped, pair_loss, GaussianEmbedding, GenuinePairSet};
use crate::error::{Error, Result};
use crate::losses::{weighted_ce, ClassWeights};
use crate::nn::{
    backward_layers, forward_layers, read_checkpoint, softmax, write_checkpoint, Activation, DenseNetwork,
    Gradients, Layer,
};
use crate::rng::{stream_rng, Stream};

/// Step-decay learning-rate schedule and epoch budget for one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub lr0: f64,
    /// Multiplicative decay applied every `period` epochs.
    pub decay: f64,
    pub period: usize,
    pub epochs: usize,
}

impl StageConfig {
    fn validate(&self, name: &str) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("{name}.lr0 must be positive")));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("{name}.decay must lie in (0, 1]")));
        }
        if self.period == 0 {
            return Err(Error::Config(format!("{name}.period must be at least 1")));
        }
        Ok(())
    }
}

/// `lr0 · decay^⌊epoch / period⌋`
pub fn lr_schedule(stage: &StageConfig, epoch: usize) -> f64 {
    stage.lr0 * stage.decay.powi((epoch / stage.period) as i32)
}

/// Training hyperparameters.
///
/// The defaults are desk-scale. The reference recipe trains the backbone with
/// Adam at lr 0.01 decayed by 0.1 every 50 epochs, and the uncertainty head
/// (two 1024-wide hidden layers) with Adam at lr 0.005 decayed by 0.1 every
/// 100 epochs, batch size 32 throughout; set `uncertainty_hidden = [1024, 1024]`
/// to use the full-width head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Class-weight exponent `k` in `n_c = (N/N_c)^k`.
    pub k: f64,
    pub backbone_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub uncertainty_hidden: Vec<usize>,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    pub stage3_enabled: bool,
    /// Use every sample (and every genuine pair) in each step.
    pub full_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 32,
            k: 0.5,
            backbone_hidden: vec![32],
            latent_dim: 8,
            uncertainty_hidden: vec![64, 64],
            stage1: StageConfig {
                lr0: 0.01,
                decay: 0.1,
                period: 50,
                epochs: 60,
            },
            stage2: StageConfig {
                lr0: 0.005,
                decay: 0.1,
                period: 100,
                epochs: 60,
            },
            stage3: StageConfig {
                lr0: 0.01,
                decay: 0.1,
                period: 50,
                epochs: 30,
            },
            stage3_enabled: true,
            full_batch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.k >= 0.0 && self.k.is_finite()) {
            return Err(Error::Config("k must be non-negative".into()));
        }
        if self.latent_dim == 0
            || self.backbone_hidden.contains(&0)
            || self.uncertainty_hidden.contains(&0)
        {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        self.stage1.validate("stage1")?;
        self.stage2.validate("stage2")?;
        self.stage3.validate("stage3")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        TrainConfig::from_toml(&text)
    }
}

/// Adam with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(params: usize) -> Self {
        Adam {
            m: vec![0.0; params],
            v: vec![0.0; params],
            t: 0,
        }
    }

    pub fn step<'a, P, G>(&mut self, params: P, grads: G, lr: f64)
    where
        P: Iterator<Item = &'a mut f64>,
        G: Iterator<Item = &'a f64>,
    {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Per-epoch mean training loss of each stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    pub stage1: Vec<f64>,
    pub stage2: Vec<f64>,
    pub stage3: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    /// Trunk up to the latent bottleneck followed by the stage-1 classifier.
    pub backbone: DenseNetwork,
    /// Maps the bottleneck activation to `ln σ²` per latent dimension.
    pub uncertainty_head: DenseNetwork,
    /// Decision layers applied to pooled features.
    pub classifier: DenseNetwork,
    pub config: TrainConfig,
    pub history: LossHistory,
    pub stages_completed: u8,
}

impl TrainedModel {
    /// Freshly initialised, untrained model.
    pub fn initialise(input_dim: usize, classes: usize, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut widths = vec![input_dim];
        widths.extend(&config.backbone_hidden);
        widths.push(config.latent_dim);
        widths.push(classes);
        let mut acts = vec![Activation::Relu; config.backbone_hidden.len()];
        acts.push(Activation::Identity);
        acts.push(Activation::Identity);
        let mut rng = stream_rng(config.seed, Stream::BackboneInit);
        let backbone = DenseNetwork::glorot(&widths, &acts, config.backbone_hidden.len(), &mut rng)?;

        let mut widths = vec![config.latent_dim];
        widths.extend(&config.uncertainty_hidden);
        widths.push(config.latent_dim);
        let mut acts = vec![Activation::Relu; config.uncertainty_hidden.len()];
        acts.push(Activation::Identity);
        let mut rng = stream_rng(config.seed, Stream::UncertaintyInit);
        let uncertainty_head = DenseNetwork::glorot(&widths, &acts, acts.len() - 1, &mut rng)?;

        let classifier = head_network(&backbone)?;
        Ok(TrainedModel {
            backbone,
            uncertainty_head,
            classifier,
            config: config.clone(),
            history: LossHistory::default(),
            stages_completed: 0,
        })
    }

    /// Reassembles a model from its three component networks.
    pub fn from_parts(
        backbone: DenseNetwork,
        uncertainty_head: DenseNetwork,
        classifier: DenseNetwork,
        config: TrainConfig,
        stages_completed: u8,
    ) -> Result<Self> {
        let latent = backbone
            .latent_width()
            .ok_or_else(|| Error::Schema("backbone has no layers".into()))?;
        if uncertainty_head.input_width() != Some(latent) || uncertainty_head.output_width() != Some(latent) {
            return Err(Error::Schema(format!(
                "uncertainty head must map {latent} → {latent} dimensions"
            )));
        }
        if classifier.input_width() != Some(latent) || classifier.output_width() != backbone.output_width() {
            return Err(Error::Schema("classifier does not match the backbone".into()));
        }
        Ok(TrainedModel {
            backbone,
            uncertainty_head,
            classifier,
            config,
            history: LossHistory::default(),
            stages_completed,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.input_width().unwrap_or(0)
    }

    pub fn classes(&self) -> usize {
        self.backbone.output_width().unwrap_or(0)
    }

    pub fn latent(&self, x: &[f64]) -> Result<Vec<f64>> {
        let pass = forward_layers(self.backbone.trunk(), x)?;
        Ok(pass.output().to_vec())
    }

    pub fn embed(&self, x: &[f64]) -> Result<GaussianEmbedding> {
        let mu = self.latent(x)?;
        embed_latent(&self.uncertainty_head, mu)
    }

    pub fn pooled(&self, x: &[f64]) -> Result<PooledFeature> {
        confidence_pool(&self.embed(x)?)
    }

    /// Pooled prediction with closed-form score variance.
    pub fn predict(&self, x: &[f64]) -> Result<PredictionRecord> {
        self.predict_with(x, PropagationMode::Strict)
    }

    pub fn predict_with(&self, x: &[f64], mode: PropagationMode) -> Result<PredictionRecord> {
        propagate_network(&self.pooled(x)?, self.classifier.layers(), mode)
    }

    /// Plain deterministic forward through the stage-1 network (zero variance).
    pub fn predict_baseline(&self, x: &[f64]) -> Result<PredictionRecord> {
        let scores = self.backbone.forward(x)?.output().to_vec();
        let n = scores.len();
        Ok(PredictionRecord::from_moments(scores, vec![0.0; n]))
    }

    /// Fingerprint of the trunk and the stage-1 classifier.
    pub fn backbone_fingerprint(&self) -> u64 {
        self.backbone.fingerprint()
    }
}

fn head_network(backbone: &DenseNetwork) -> Result<DenseNetwork> {
    let head = backbone.head().to_vec();
    let last = head.len().saturating_sub(1);
    DenseNetwork::new(head, last)
}

fn embed_latent(head: &DenseNetwork, mu: Vec<f64>) -> Result<GaussianEmbedding> {
    let raw = head.forward(&mu)?.output().to_vec();
    GaussianEmbedding::new(mu, raw)
}

/// Draws a batch of dataset indices containing at least one same-label pair:
/// `⌈batch_size/2⌉` classes are chosen with replacement in proportion to their
/// frequency (among classes with two or more samples), then two distinct
/// samples of each. Samples are drawn without replacement within a class while
/// unused samples remain. The result is truncated to `batch_size`.
pub fn sample_batch<R: Rng + ?Sized>(labels: &[usize], batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if batch_size < 2 {
        return Err(Error::Config("batch_size must be at least 2".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let eligible: Vec<usize> = (0..classes).filter(|&c| members[c].len() >= 2).collect();
    if eligible.is_empty() {
        return Err(Error::NoGenuinePairs);
    }
    let dist = WeightedIndex::new(eligible.iter().map(|&c| members[c].len()))
        .expect("eligible classes have positive counts");
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    let mut batch = Vec::with_capacity(batch_size + 1);
    for _ in 0..batch_size.div_ceil(2) {
        let c = eligible[dist.sample(rng)];
        if pools[c].len() < 2 {
            let mut fresh: Vec<usize> = members[c].iter().copied().filter(|i| !batch.contains(i)).collect();
            if fresh.len() < 2 {
                fresh = members[c].clone();
            }
            fresh.shuffle(rng);
            pools[c] = fresh;
        }
        batch.push(pools[c].pop().expect("pool holds two"));
        batch.push(pools[c].pop().expect("pool holds two"));
    }
    batch.truncate(batch_size);
    Ok(batch)
}

fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, full: bool, rng: &mut R) -> Vec<Vec<usize>> {
    if full {
        return vec![(0..n).collect()];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn check_dataset(model: &TrainedModel, dataset: &Dataset) -> Result<()> {
    if dataset.dim() != model.input_dim() || dataset.class_count() != model.classes() {
        return Err(Error::Schema(format!(
            "model expects {} features and {} classes, dataset has {} and {}",
            model.input_dim(),
            model.classes(),
            dataset.dim(),
            dataset.class_count()
        )));
    }
    Ok(())
}

/// Weighted-CE descent on `layers` with inputs supplied per sample.
fn fit_classifier<F>(
    layers: &mut [Layer],
    inputs: F,
    labels: &[usize],
    weights: &ClassWeights,
    stage: &StageConfig,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>>
where
    F: Fn(usize) -> Vec<f64>,
{
    let params: usize = layers.iter().map(|l| l.affine.param_count()).sum();
    let mut adam = Adam::new(params);
    let mut history = Vec::with_capacity(stage.epochs);
    for epoch in 0..stage.epochs {
        let lr = lr_schedule(stage, epoch);
        let mut total = 0.0;
        for batch in epoch_batches(labels.len(), config.batch_size, config.full_batch, rng) {
            let mut grads = Gradients::zeros_like(layers);
            for &i in &batch {
                let pass = forward_layers(layers, &inputs(i))?;
                let ce = weighted_ce(&softmax(pass.output()), labels[i], weights)?;
                total += ce.loss;
                grads.add_assign(&backward_layers(layers, &pass, &ce.grad)?);
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(
                layers.iter_mut().flat_map(|l| {
                    l.affine
                        .weights
                        .as_mut_slice()
                        .iter_mut()
                        .chain(l.affine.bias.iter_mut())
                }),
                grads.params(),
                lr,
            );
        }
        let mean = total / labels.len() as f64;
        if !mean.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss: mean });
        }
        history.push(mean);
    }
    Ok(history)
}

/// Stage 1: backbone and classifier with class-weighted cross-entropy.
pub fn train_backbone(dataset: &Dataset, config: &TrainConfig) -> Result<TrainedModel> {
    if dataset.is_empty() || dataset.class_count() < 2 {
        return Err(Error::Config("stage 1 needs a non-empty dataset with at least 2 classes".into()));
    }
    let mut model = TrainedModel::initialise(dataset.dim(), dataset.class_count(), config)?;
    let weights = ClassWeights::new(dataset.class_counts(), config.k)?;
    let mut rng = stream_rng(config.seed, Stream::Stage1Batches);
    model.history.stage1 = fit_classifier(
        model.backbone.layers_mut(),
        |i| dataset.sample(i).to_vec(),
        dataset.labels(),
        &weights,
        &config.stage1,
        config,
        &mut rng,
    )?;
    model.classifier = head_network(&model.backbone)?;
    model.stages_completed = 1;
    Ok(model)
}

/// Stage 2: uncertainty head on frozen latent means, minimising the mean
/// negative mutual likelihood score over genuine pairs in each batch.
pub fn train_uncertainty(mut model: TrainedModel, dataset: &Dataset) -> Result<TrainedModel> {
    if model.stages_completed < 1 {
        return Err(Error::State("stage 2 needs a stage-1 model".into()));
    }
    check_dataset(&model, dataset)?;
    let config = model.config.clone();
    let latents: Vec<Vec<f64>> = (0..dataset.len())
        .map(|i| model.latent(dataset.sample(i)))
        .collect::<Result<_>>()?;
    let labels = dataset.labels();
    let mut rng = stream_rng(config.seed, Stream::Stage2Batches);
    let head = &mut model.uncertainty_head;
    let mut adam = Adam::new(head.param_count());
    let steps = if config.full_batch { 1 } else { dataset.len().div_ceil(config.batch_size) };
    let mut history = Vec::with_capacity(config.stage2.epochs);
    for epoch in 0..config.stage2.epochs {
        let lr = lr_schedule(&config.stage2, epoch);
        let mut total = 0.0;
        for _ in 0..steps {
            let batch = if config.full_batch {
                (0..dataset.len()).collect()
            } else {
                sample_batch(labels, config.batch_size, &mut rng)?
            };
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let pairs: Vec<(usize, usize)> = enumerate_genuine_pairs(&batch_labels)
                .pairs()
                .iter()
                .copied()
                .filter(|&(a, b)| batch[a] != batch[b])
                .collect();
            let pairs = GenuinePairSet::new(pairs, &batch_labels)?;
            let passes = batch
                .iter()
                .map(|&i| head.forward(&latents[i]))
                .collect::<Result<Vec<_>>>()?;
            let embeddings = batch
                .iter()
                .zip(&passes)
                .map(|(&i, p)| GaussianEmbedding::new(latents[i].clone(), p.output().to_vec()))
                .collect::<Result<Vec<_>>>()?;
            let out = pair_loss(&embeddings, &pairs)?;
            total += out.loss;
            let mut grads = Gradients::zeros_like(head.layers());
            for (pass, g) in passes.iter().zip(&out.grad_log_var) {
                let upstream: Vec<f64> = pass
                    .output()
                    .iter()
                    .zip(g)
                    .map(|(&raw, &gl)| if log_var_unclamped(raw) { gl } else { 0.0 })
                    .collect();
                grads.add_assign(&head.backward(pass, &upstream)?);
            }
            adam.step(head.params_mut(), grads.params(), lr);
        }
        let mean = total / steps as f64;
        if !mean.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss: mean });
        }
        history.push(mean);
    }
    model.history.stage2 = history;
    model.stages_completed = 2;
    Ok(model)
}

/// Stage 3: re-fit the classifier on confidence-pooled features. The first
/// classifier layer is warm-started from the stage-1 weights scaled by the
/// mean pooling normaliser `Σq`, which undoes the average rescaling that
/// pooling applies to the features.
pub fn finetune_classifier(mut model: TrainedModel, dataset: &Dataset) -> Result<TrainedModel> {
    if model.stages_completed < 2 {
        return Err(Error::State("stage 3 needs a stage-2 model".into()));
    }
    if !model.config.stage3_enabled {
        return Ok(model);
    }
    check_dataset(&model, dataset)?;
    let config = model.config.clone();
    let pooled: Vec<Vec<f64>> = (0..dataset.len())
        .map(|i| model.pooled(dataset.sample(i)).map(|p| p.mu_hat))
        .collect::<Result<_>>()?;
    let mut norm = 0.0;
    for i in 0..dataset.len() {
        norm += model.pooled(dataset.sample(i))?.q.iter().sum::<f64>();
    }
    norm /= dataset.len() as f64;

    let mut classifier = head_network(&model.backbone)?;
    if let Some(first) = classifier.layers_mut().first_mut() {
        first.affine.weights.as_mut_slice().iter_mut().for_each(|w| *w *= norm);
    }
    let weights = ClassWeights::new(dataset.class_counts(), config.k)?;
    let mut rng = stream_rng(config.seed, Stream::Stage3Batches);
    model.history.stage3 = fit_classifier(
        classifier.layers_mut(),
        |i| pooled[i].clone(),
        dataset.labels(),
        &weights,
        &config.stage3,
        &config,
        &mut rng,
    )?;
    model.classifier = classifier;
    model.stages_completed = 3;
    Ok(model)
}

/// Runs all enabled stages.
pub fn train_all(dataset: &Dataset, config: &TrainConfig) -> Result<TrainedModel> {
    let model = train_backbone(dataset, config)?;
    let model = train_uncertainty(model, dataset)?;
    finetune_classifier(model, dataset)
}

pub const BACKBONE_FILE: &str = "backbone.cemb";
pub const UNCERTAINTY_FILE: &str = "uncertainty.cemb";
pub const CLASSIFIER_FILE: &str = "classifier.cemb";

pub fn save_network(net: &DenseNetwork, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    write_checkpoint(net, std::io::BufWriter::new(file))
}

pub fn load_network(path: &Path) -> Result<DenseNetwork> {
    if !path.exists() {
        return Err(Error::Dependency(path.to_path_buf()));
    }
    read_checkpoint(std::io::BufReader::new(fs::File::open(path)?))
}

/// Writes the component checkpoints present at the model's stage.
pub fn save_model(model: &TrainedModel, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = vec![dir.join(BACKBONE_FILE)];
    save_network(&model.backbone, &written[0])?;
    if model.stages_completed >= 2 {
        written.push(dir.join(UNCERTAINTY_FILE));
        save_network(&model.uncertainty_head, &written[1])?;
    }
    if model.stages_completed >= 3 || (model.stages_completed >= 2 && !model.config.stage3_enabled) {
        written.push(dir.join(CLASSIFIER_FILE));
        save_network(&model.classifier, &written[written.len() - 1])?;
    }
    Ok(written)
}

/// Loads a model saved by [`save_model`]; `stage` is the stage it must have
/// completed. Missing checkpoints are dependency errors.
pub fn load_model(dir: &Path, config: &TrainConfig, stage: u8) -> Result<TrainedModel> {
    let backbone = load_network(&dir.join(BACKBONE_FILE))?;
    let classes = backbone.output_width().unwrap_or(0);
    let mut model = TrainedModel::initialise(backbone.input_width().unwrap_or(0), classes, config)?;
    if model.backbone.layers().len() != backbone.layers().len() || model.backbone.bottleneck() != backbone.bottleneck() {
        return Err(Error::Schema("backbone checkpoint does not match the configured architecture".into()));
    }
    model.classifier = head_network(&backbone)?;
    model.backbone = backbone;
    model.stages_completed = 1;
    if stage >= 2 {
        model.uncertainty_head = load_network(&dir.join(UNCERTAINTY_FILE))?;
        model.stages_completed = 2;
    }
    if stage >= 3 {
        model.classifier = load_network(&dir.join(CLASSIFIER_FILE))?;
        model.stages_completed = 3;
    }
    TrainedModel::from_parts(
        model.backbone,
        model.uncertainty_head,
        model.classifier,
        model.config,
        model.stages_completed,
    )
}
