//! Datasets: synthetic heteroscedastic generator, stratified k-fold splits,
//! and CSV storage.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::confidence::csv_err;
use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    class_count: usize,
    class_counts: Vec<usize>,
    provenance: String,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        class_count: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Schema(format!(
                "label {bad} with only {class_count} classes"
            )));
        }
        let mut class_counts = vec![0; class_count];
        for &l in &labels {
            class_counts[l] += 1;
        }
        if let Some(class) = class_counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyClass { class });
        }
        Ok(Dataset {
            features,
            labels,
            class_count,
            class_counts,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Rows at `indices`, in that order. Every class must stay represented.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let dim = self.dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Range(format!("row {i} of {}", self.len())));
            }
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(
            Matrix::from_vec(indices.len(), dim, data)?,
            labels,
            self.class_count,
            format!("{} (subset of {} rows)", self.provenance, indices.len()),
        )
    }
}

fn default_separation() -> f64 {
    1.0
}

fn default_scale() -> f64 {
    1.0
}

fn default_multiplier() -> f64 {
    5.0
}

/// Generator settings. Signal dimensions carry class-dependent centres;
/// noise dimensions are zero-centred for every class. A fixed fraction of
/// each class is "corrupted": its noise dimensions get their scale multiplied
/// by `corruption_multiplier`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub class_counts: Vec<usize>,
    pub signal_dims: usize,
    pub noise_dims: usize,
    /// Standard deviation of the class centres on signal dimensions.
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_scale")]
    pub signal_scale: f64,
    #[serde(default = "default_scale")]
    pub noise_scale: f64,
    /// Per-dimension noise scales (signal dims first); overrides the two
    /// scalar scales when present.
    #[serde(default)]
    pub noise_scales: Option<Vec<f64>>,
    #[serde(default)]
    pub corrupted_fraction: f64,
    #[serde(default = "default_multiplier")]
    pub corruption_multiplier: f64,
}

impl SynthConfig {
    /// Three imbalanced classes, 8 signal and 8 noise dimensions, 30 % corrupted.
    pub fn benchmark(seed: u64) -> Self {
        SynthConfig {
            seed,
            class_counts: vec![600, 150, 50],
            signal_dims: 8,
            noise_dims: 8,
            separation: 1.5,
            signal_scale: 1.0,
            noise_scale: 3.0,
            noise_scales: None,
            corrupted_fraction: 0.3,
            corruption_multiplier: 5.0,
        }
    }

    pub fn input_dims(&self) -> usize {
        self.signal_dims + self.noise_dims
    }

    pub fn scales(&self) -> Vec<f64> {
        match &self.noise_scales {
            Some(s) => s.clone(),
            None => std::iter::repeat_n(self.signal_scale, self.signal_dims)
                .chain(std::iter::repeat_n(self.noise_scale, self.noise_dims))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_counts.is_empty() {
            return Err(Error::Config("at least one class is required".into()));
        }
        if let Some(c) = self.class_counts.iter().position(|&n| n < 2) {
            return Err(Error::Config(format!("class {c} needs at least 2 samples")));
        }
        if self.input_dims() == 0 {
            return Err(Error::Config("no input dimensions".into()));
        }
        if let Some(s) = &self.noise_scales {
            if s.len() != self.input_dims() {
                return Err(Error::Config(format!(
                    "{} noise scales for {} dimensions",
                    s.len(),
                    self.input_dims()
                )));
            }
        }
        if self.scales().iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("noise scales must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.corrupted_fraction) {
            return Err(Error::Config("corrupted_fraction must lie in [0, 1]".into()));
        }
        if !(self.corruption_multiplier > 0.0 && self.separation >= 0.0) {
            return Err(Error::Config("invalid multiplier or separation".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SynthConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        SynthConfig::from_toml(&text)
    }
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, Stream::Data);
    let dim = cfg.input_dims();
    let classes = cfg.class_counts.len();
    let scales = cfg.scales();

    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..dim)
                .map(|d| {
                    if d < cfg.signal_dims {
                        let z: f64 = rng.sample(StandardNormal);
                        cfg.separation * z
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();

    let mut slots: Vec<(usize, bool)> = Vec::new();
    for (class, &count) in cfg.class_counts.iter().enumerate() {
        let corrupted = (cfg.corrupted_fraction * count as f64).round() as usize;
        let mut flags: Vec<bool> = (0..count).map(|i| i < corrupted).collect();
        flags.shuffle(&mut rng);
        slots.extend(flags.into_iter().map(|f| (class, f)));
    }
    slots.shuffle(&mut rng);

    let mut data = Vec::with_capacity(slots.len() * dim);
    let mut labels = Vec::with_capacity(slots.len());
    for &(class, corrupted) in &slots {
        for d in 0..dim {
            let mut scale = scales[d];
            if corrupted && d >= cfg.signal_dims {
                scale *= cfg.corruption_multiplier;
            }
            let z: f64 = rng.sample(StandardNormal);
            data.push(centres[class][d] + scale * z);
        }
        labels.push(class);
    }
    Dataset::new(
        Matrix::from_vec(labels.len(), dim, data)?,
        labels,
        classes,
        format!("synthetic(seed={})", cfg.seed),
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified k-fold partition. Each class is shuffled and dealt round-robin,
/// continuing the deal position across classes so fold sizes differ by at
/// most one.
pub fn kfold_split(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    for (class, m) in members.iter().enumerate() {
        if !m.is_empty() && m.len() < folds {
            return Err(Error::Stratification {
                class,
                count: m.len(),
                folds,
            });
        }
    }
    let mut rng = stream_rng(seed, Stream::Split);
    let mut tests: Vec<Vec<usize>> = vec![Vec::new(); folds];
    let mut next = 0;
    for mut m in members {
        m.shuffle(&mut rng);
        for idx in m {
            tests[next].push(idx);
            next = (next + 1) % folds;
        }
    }
    Ok(tests
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let mut in_test = vec![false; labels.len()];
            for &i in &test {
                in_test[i] = true;
            }
            let train = (0..labels.len()).filter(|&i| !in_test[i]).collect();
            Fold { train, test }
        })
        .collect())
}

pub fn write_dataset_csv<W: Write>(dataset: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..dataset.dim()).map(|d| format!("f{d}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..dataset.len() {
        let mut row: Vec<String> = dataset.sample(i).iter().map(f64::to_string).collect();
        row.push(dataset.labels()[i].to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset; the class count is `classes` when given, otherwise
/// one more than the largest label.
pub fn read_dataset_csv<R: Read>(input: R, classes: Option<usize>, provenance: &str) -> Result<Dataset> {
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut rows = rd.records();
    let header = match rows.next() {
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty file".into(),
            })
        }
        Some(h) => h.map_err(csv_err)?,
    };
    let width = header.len();
    let dim = width.saturating_sub(1);
    let header_ok = width >= 2
        && &header[width - 1] == "label"
        && (0..dim).all(|d| header[d] == *format!("f{d}"));
    if !header_ok {
        return Err(Error::Parse {
            line: 1,
            message: "expected header f0,...,f{D-1},label".into(),
        });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (idx, row) in rows.enumerate() {
        let line = idx + 2;
        let row = row.map_err(csv_err)?;
        if row.len() != width {
            return Err(Error::Parse {
                line,
                message: format!("row {line} has {} fields, header has {width}", row.len()),
            });
        }
        for field in row.iter().take(dim) {
            let v: f64 = field.trim().parse().map_err(|e| Error::Parse {
                line,
                message: format!("{field:?}: {e}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: "non-finite feature".into(),
                });
            }
            data.push(v);
        }
        let label: usize = row[dim].trim().parse().map_err(|e| Error::Parse {
            line,
            message: format!("label {:?}: {e}", &row[dim]),
        })?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "no data rows".into(),
        });
    }
    let class_count = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(
        Matrix::from_vec(labels.len(), dim, data)?,
        labels,
        class_count,
        provenance,
    )
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    write_dataset_csv(dataset, std::io::BufWriter::new(file))
}

pub fn load_dataset(path: &Path, classes: Option<usize>) -> Result<Dataset> {
    let file = fs::File::open(path)?;
    read_dataset_csv(std::io::BufReader::new(file), classes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_cfg(seed: u64, frac: f64) -> SynthConfig {
        SynthConfig {
            seed,
            class_counts: vec![40, 20],
            signal_dims: 3,
            noise_dims: 3,
            separation: 2.0,
            signal_scale: 1.0,
            noise_scale: 1.0,
            noise_scales: None,
            corrupted_fraction: frac,
            corruption_multiplier: 5.0,
        }
    }

    #[test]
    fn counts_are_exact() {
        let cfg = SynthConfig {
            class_counts: vec![670, 12],
            ..small_cfg(1, 0.2)
        };
        let d = synth_generate(&cfg).unwrap();
        assert_eq!(d.class_counts(), &[670, 12]);
        assert_eq!(d.len(), 682);
        assert_eq!(d.dim(), 6);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = synth_generate(&small_cfg(3, 0.3)).unwrap();
        let b = synth_generate(&small_cfg(3, 0.3)).unwrap();
        let bits = |d: &Dataset| d.features().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.labels(), b.labels());
        let c = synth_generate(&small_cfg(4, 0.3)).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn corruption_inflates_noise_dimensions() {
        let noise_var = |d: &Dataset| {
            let mut total = 0.0;
            for dim in 3..6 {
                let vals: Vec<f64> = (0..d.len()).map(|i| d.sample(i)[dim]).collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                total += vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
            }
            total / 3.0
        };
        let clean = synth_generate(&small_cfg(8, 0.0)).unwrap();
        let noisy = synth_generate(&small_cfg(8, 0.3)).unwrap();
        assert!(noise_var(&noisy) > noise_var(&clean));
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = small_cfg(1, 0.0);
        cfg.class_counts = vec![5, 1];
        assert!(matches!(synth_generate(&cfg), Err(Error::Config(_))));
        let mut cfg = small_cfg(1, 0.0);
        cfg.noise_scales = Some(vec![1.0; 2]);
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg(1, 0.0);
        cfg.corrupted_fraction = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = SynthConfig::benchmark(11);
        assert_eq!(SynthConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(SynthConfig::from_toml("seed = 1\nbogus = 2").is_err());
    }

    #[test]
    fn kfold_examples() {
        let labels = vec![0; 10];
        let folds = kfold_split(&labels, 5, 1).unwrap();
        assert_eq!(folds.len(), 5);
        assert!(folds.iter().all(|f| f.test.len() == 2 && f.train.len() == 8));

        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 80)).collect();
        for f in kfold_split(&labels, 5, 9).unwrap() {
            let minority = f.test.iter().filter(|&&i| labels[i] == 1).count();
            assert!((3..=5).contains(&minority));
            assert!((15..=17).contains(&(f.test.len() - minority)));
        }
        assert!(matches!(
            kfold_split(&[0, 0, 0, 1, 1], 3, 0),
            Err(Error::Stratification { class: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn kfold_partitions_indices(
            labels in prop::collection::vec(0usize..3, 15..80),
            k in 2usize..6,
            seed in any::<u64>(),
        ) {
            let mut counts = [0usize; 3];
            labels.iter().for_each(|&l| counts[l] += 1);
            prop_assume!(counts.iter().all(|&c| c == 0 || c >= k));
            let folds = kfold_split(&labels, k, seed).unwrap();
            let mut seen = vec![0; labels.len()];
            for f in &folds {
                for &i in &f.test { seen[i] += 1; }
                prop_assert_eq!(f.train.len() + f.test.len(), labels.len());
                for (c, &count) in counts.iter().enumerate() {
                    let n = f.test.iter().filter(|&&i| labels[i] == c).count();
                    prop_assert!(n == count / k || n == count.div_ceil(k));
                }
            }
            prop_assert!(seen.iter().all(|&s| s == 1));
            let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            prop_assert_eq!(folds, kfold_split(&labels, k, seed).unwrap());
        }
    }

    #[test]
    fn csv_round_trip() {
        let d = synth_generate(&small_cfg(5, 0.3)).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&d, &mut buf).unwrap();
        assert!(buf.starts_with(b"f0,f1,f2,f3,f4,f5,label\n"));
        let back = read_dataset_csv(buf.as_slice(), None, "mem").unwrap();
        assert_eq!(back.features(), d.features());
        assert_eq!(back.labels(), d.labels());
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(
            read_dataset_csv(&b""[..], None, "x"),
            Err(Error::Parse { line: 1, .. })
        ));
        let bad = b"f0,f1,label\n1,2,0\n1,0\n";
        match read_dataset_csv(&bad[..], None, "x") {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("row 3"));
            }
            other => panic!("{other:?}"),
        }
        let garbage = b"f0,label\nabc,0\n";
        assert!(matches!(read_dataset_csv(&garbage[..], None, "x"), Err(Error::Parse { line: 2, .. })));
        let out_of_range = b"f0,label\n1.0,0\n2.0,3\n";
        assert!(matches!(read_dataset_csv(&out_of_range[..], Some(2), "x"), Err(Error::Schema(_))));
    }
}
