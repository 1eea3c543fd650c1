//! `cemb`: synthetic data, staged training and confidence-based evaluation.
//!
//! Exit status is 0 on success, 1 on runtime or numeric failure and 2 on
//! usage or configuration errors.

mod manifest;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cemb::confidence::{write_predictions_csv, PredictionRecord};
use cemb::data::{load_dataset, save_dataset, synth_generate, SynthConfig};
use cemb::eval::{
    metrics, rejection_curve, write_metrics_csv, write_per_class_csv, write_rejection_csv, RejectionMode,
};
use cemb::experiment::{run_benchmark, BenchmarkConfig};
use cemb::train::{
    finetune_classifier, load_model, save_model, train_all, train_backbone, train_uncertainty, TrainConfig,
    TrainedModel, BACKBONE_FILE, CLASSIFIER_FILE, UNCERTAINTY_FILE,
};
use cemb::{Error, Result};
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use manifest::RunManifest;

const CONFIG_SNAPSHOT: &str = "train_config.toml";
const LOSS_HISTORY: &str = "loss_history.csv";

#[derive(Parser)]
#[command(name = "cemb", version, about = "Gaussian latent embeddings with confidence pooling and rejection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a TOML generator config.
    SynthData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage, or all of them, writing checkpoints to OUT_DIR.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        stage: Stage,
    },
    /// Predict a dataset and write metrics and the rejection curve.
    Evaluate {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated, strictly increasing ratios in [0, 1).
        #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.10,0.20")]
        reject: Vec<f64>,
        /// `global` or `per-class`.
        #[arg(long, default_value = "global")]
        mode: RejectionMode,
        /// Defaults to the model directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Use the stage-1 network without pooling.
        #[arg(long)]
        baseline: bool,
    },
    /// Cross-validated comparison of the stage-1 and pooled models.
    Benchmark {
        #[arg(long)]
        synth_config: Option<PathBuf>,
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthData { .. } => "synth-data",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Benchmark { .. } => "benchmark",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                let mut cmd = Cli::command();
                cmd.build();
                if let Some(sub) = cmd.find_subcommand_mut(name) {
                    eprintln!("\n{}", sub.render_usage());
                }
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthData { config, out } => synth_data(&config, &out),
        Command::Train {
            dataset,
            config,
            out_dir,
            stage,
        } => train(&dataset, &config, &out_dir, stage),
        Command::Evaluate {
            model_dir,
            dataset,
            reject,
            mode,
            out_dir,
            baseline,
        } => evaluate(&model_dir, &dataset, &reject, mode, out_dir.as_deref(), baseline),
        Command::Benchmark {
            synth_config,
            train_config,
            seeds,
            folds,
            out_dir,
        } => benchmark(synth_config.as_deref(), train_config.as_deref(), seeds, folds, &out_dir),
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.toml");
    out.with_file_name(name)
}

fn synth_data(config: &Path, out: &Path) -> Result<()> {
    let mut manifest = RunManifest::start("synth-data");
    let cfg = SynthConfig::load(config)?;
    manifest.config_path = Some(config.to_path_buf());
    manifest.seed = Some(cfg.seed);
    manifest.config = Some(cfg.to_toml());
    manifest.input(config)?;
    let dataset = synth_generate(&cfg)?;
    save_dataset(&dataset, out)?;
    manifest.output(out)?;
    manifest.write(&manifest_path(out))?;
    eprintln!("wrote {} samples to {}", dataset.len(), out.display());
    Ok(())
}

fn write_loss_history(path: &Path, model: &TrainedModel, first_stage: u8) -> Result<()> {
    let mut rows: Vec<(u8, usize, f64)> = Vec::new();
    if first_stage > 1 && path.exists() {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Schema(e.to_string()))?;
        for rec in reader.deserialize() {
            let row: (u8, usize, f64) = rec.map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
            if row.0 < first_stage {
                rows.push(row);
            }
        }
    }
    for (stage, history) in [
        (1, &model.history.stage1),
        (2, &model.history.stage2),
        (3, &model.history.stage3),
    ] {
        if stage >= first_stage {
            rows.extend(history.iter().enumerate().map(|(e, &l)| (stage, e, l)));
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    w.write_record(["stage", "epoch", "loss"]).map_err(|e| Error::Io(e.into()))?;
    for (s, e, l) in rows {
        w.write_record([s.to_string(), e.to_string(), l.to_string()])
            .map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

fn train(dataset_path: &Path, config_path: &Path, out_dir: &Path, stage: Stage) -> Result<()> {
    let mut manifest = RunManifest::start("train");
    let cfg = TrainConfig::load(config_path)?;
    manifest.config_path = Some(config_path.to_path_buf());
    manifest.seed = Some(cfg.seed);
    manifest.config = Some(cfg.to_toml());
    manifest.input(config_path)?;
    manifest.input(dataset_path)?;
    let dataset = load_dataset(dataset_path, None)?;
    fs::create_dir_all(out_dir)?;

    let (model, first_stage) = match stage {
        Stage::All => (train_all(&dataset, &cfg)?, 1),
        Stage::One => {
            for stale in [UNCERTAINTY_FILE, CLASSIFIER_FILE] {
                let p = out_dir.join(stale);
                if p.exists() {
                    fs::remove_file(p)?;
                }
            }
            (train_backbone(&dataset, &cfg)?, 1)
        }
        Stage::Two => {
            let model = load_model(out_dir, &cfg, 1)?;
            (train_uncertainty(model, &dataset)?, 2)
        }
        Stage::Three => {
            for needed in [BACKBONE_FILE, UNCERTAINTY_FILE] {
                if !out_dir.join(needed).exists() {
                    return Err(Error::Dependency(out_dir.join(needed)));
                }
            }
            let model = load_model(out_dir, &cfg, 2)?;
            (finetune_classifier(model, &dataset)?, 3)
        }
    };

    let mut written = save_model(&model, out_dir)?;
    written.retain(|p| match first_stage {
        1 => true,
        2 => !p.ends_with(BACKBONE_FILE),
        _ => p.ends_with(CLASSIFIER_FILE),
    });
    fs::write(out_dir.join(CONFIG_SNAPSHOT), cfg.to_toml())?;
    write_loss_history(&out_dir.join(LOSS_HISTORY), &model, first_stage)?;
    written.push(out_dir.join(CONFIG_SNAPSHOT));
    written.push(out_dir.join(LOSS_HISTORY));
    for p in &written {
        manifest.output(p)?;
    }
    manifest.write(&out_dir.join(format!("train_stage{}.manifest.toml", stage_label(stage))))?;
    eprintln!("trained through stage {} in {}", model.stages_completed, out_dir.display());
    Ok(())
}

fn stage_label(stage: Stage) -> &'static str {
    match stage {
        Stage::One => "1",
        Stage::Two => "2",
        Stage::Three => "3",
        Stage::All => "_all",
    }
}

fn load_trained(dir: &Path) -> Result<(TrainedModel, u8)> {
    let snapshot = dir.join(CONFIG_SNAPSHOT);
    if !snapshot.exists() {
        return Err(Error::Dependency(snapshot));
    }
    let cfg = TrainConfig::load(&snapshot)?;
    let stage = if dir.join(CLASSIFIER_FILE).exists() {
        3
    } else if dir.join(UNCERTAINTY_FILE).exists() {
        2
    } else {
        1
    };
    Ok((load_model(dir, &cfg, stage)?, stage))
}

fn evaluate(
    model_dir: &Path,
    dataset_path: &Path,
    ratios: &[f64],
    mode: RejectionMode,
    out_dir: Option<&Path>,
    baseline: bool,
) -> Result<()> {
    let mut manifest = RunManifest::start("evaluate");
    let (model, stage) = load_trained(model_dir)?;
    manifest.seed = Some(model.config.seed);
    manifest.input(dataset_path)?;
    for f in [BACKBONE_FILE, UNCERTAINTY_FILE, CLASSIFIER_FILE, CONFIG_SNAPSHOT] {
        let p = model_dir.join(f);
        if p.exists() {
            manifest.input(&p)?;
        }
    }
    let dataset = load_dataset(dataset_path, Some(model.classes()))?;
    if dataset.dim() != model.input_dim() {
        return Err(Error::Schema(format!(
            "model expects {} features, dataset has {}",
            model.input_dim(),
            dataset.dim()
        )));
    }
    let pooled = !baseline && stage >= 2;
    let records = (0..dataset.len())
        .map(|i| {
            let x = dataset.sample(i);
            let r = if pooled { model.predict(x) } else { model.predict_baseline(x) };
            r.map(|r| r.with_sample(i, Some(dataset.labels()[i])))
        })
        .collect::<Result<Vec<PredictionRecord>>>()?;
    let m = metrics(&records)?;
    let curve = rejection_curve(&records, ratios, mode)?;

    let out = out_dir.unwrap_or(model_dir);
    fs::create_dir_all(out)?;
    let files = [
        out.join("predictions.csv"),
        out.join("metrics.csv"),
        out.join("per_class.csv"),
        out.join("rejection.csv"),
    ];
    write_predictions_csv(&records, BufWriter::new(fs::File::create(&files[0])?))?;
    write_metrics_csv(&m, BufWriter::new(fs::File::create(&files[1])?))?;
    write_per_class_csv(&m, BufWriter::new(fs::File::create(&files[2])?))?;
    write_rejection_csv(&curve, BufWriter::new(fs::File::create(&files[3])?))?;
    for f in &files {
        manifest.output(f)?;
    }
    manifest.write(&out.join("evaluate.manifest.toml"))?;
    eprintln!(
        "{} predictions: acc {:.4}, bacc {:.4}, f1 {:.4}",
        if pooled { "pooled" } else { "baseline" },
        m.accuracy,
        m.balanced_accuracy,
        m.f1_macro
    );
    Ok(())
}

fn benchmark(
    synth: Option<&Path>,
    train: Option<&Path>,
    seeds: u64,
    folds: usize,
    out_dir: &Path,
) -> Result<()> {
    let mut manifest = RunManifest::start("benchmark");
    let mut cfg = BenchmarkConfig::standard();
    if let Some(p) = synth {
        cfg.synth = SynthConfig::load(p)?;
        manifest.input(p)?;
    }
    if let Some(p) = train {
        cfg.train = TrainConfig::load(p)?;
        manifest.input(p)?;
    }
    cfg.seeds = (0..seeds).collect();
    cfg.folds = folds;
    manifest.config = Some(format!("{}\n[train]\n{}", cfg.synth.to_toml(), cfg.train.to_toml()));
    let report = run_benchmark(&cfg)?;

    fs::create_dir_all(out_dir)?;
    let per_seed = out_dir.join("benchmark.csv");
    let mut w = csv::Writer::from_path(&per_seed).map_err(|e| Error::Io(e.into()))?;
    w.write_record(["seed", "baseline_bacc", "pooled_bacc", "improvement", "noise_var", "signal_var"])
        .map_err(|e| Error::Io(e.into()))?;
    for s in &report.seeds {
        w.write_record([
            s.seed.to_string(),
            s.baseline_bacc.to_string(),
            s.pooled_bacc.to_string(),
            (s.pooled_bacc - s.baseline_bacc).to_string(),
            s.noise_var.to_string(),
            s.signal_var.to_string(),
        ])
        .map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    let curve = out_dir.join("rejection_mean.csv");
    let mut w = csv::Writer::from_path(&curve).map_err(|e| Error::Io(e.into()))?;
    w.write_record(["ratio", "acc", "bacc"]).map_err(|e| Error::Io(e.into()))?;
    for (r, acc, bacc) in report.mean_rejection() {
        w.write_record([r.to_string(), acc.to_string(), bacc.to_string()])
            .map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    manifest.output(&per_seed)?;
    manifest.output(&curve)?;
    manifest.write(&out_dir.join("benchmark.manifest.toml"))?;
    println!(
        "baseline bacc {:.4}  pooled bacc {:.4}  mean improvement {:+.4}",
        report.mean_baseline_bacc(),
        report.mean_pooled_bacc(),
        report.mean_improvement()
    );
    for (r, acc, bacc) in report.mean_rejection() {
        println!("reject {r:.2}: acc {acc:.4} bacc {bacc:.4}");
    }
    Ok(())
}
