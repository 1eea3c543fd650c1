//! Classification metrics and confidence-based rejection curves.

use std::io::Write;

use crate::confidence::{csv_err, PredictionRecord};
use crate::error::{Error, Result};

/// Rejection ratios reported by default.
pub const DEFAULT_REJECTION_RATIOS: [f64; 4] = [0.0, 0.05, 0.10, 0.20];

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, truth: usize, predicted: usize) -> usize {
        self.counts[truth][predicted]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, truth: usize) -> usize {
        self.counts[truth].iter().sum()
    }

    pub fn col_sum(&self, predicted: usize) -> usize {
        self.counts.iter().map(|r| r[predicted]).sum()
    }

    pub fn is_diagonal(&self) -> bool {
        self.counts
            .iter()
            .enumerate()
            .all(|(i, r)| r.iter().enumerate().all(|(j, &c)| i == j || c == 0))
    }
}

fn labelled(records: &[PredictionRecord]) -> Result<usize> {
    let classes = records
        .first()
        .map(PredictionRecord::classes)
        .ok_or_else(|| Error::Schema("no prediction records".into()))?;
    for r in records {
        let t = r
            .true_label
            .ok_or_else(|| Error::Schema(format!("record {} has no true label", r.sample_id)))?;
        if r.classes() != classes || t >= classes || r.predicted_class >= classes {
            return Err(Error::Schema(format!(
                "record {} is inconsistent with {classes} classes",
                r.sample_id
            )));
        }
    }
    Ok(classes)
}

pub fn confusion(records: &[PredictionRecord]) -> Result<ConfusionMatrix> {
    let classes = labelled(records)?;
    let mut counts = vec![vec![0; classes]; classes];
    for r in records {
        counts[r.true_label.expect("checked")][r.predicted_class] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub support: usize,
    /// Recall; `None` when the class is absent from the truth.
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    /// One-vs-rest binary accuracy `(TP + TN) / n`.
    pub accuracy: f64,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub f1_macro: f64,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub mean_auc: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    /// Classes with no true samples, left out of the macro averages.
    pub absent_classes: Vec<usize>,
    pub samples: usize,
}

pub fn metrics(records: &[PredictionRecord]) -> Result<Metrics> {
    let cm = confusion(records)?;
    let n = cm.total();
    let classes = cm.classes();
    let mut per_class = Vec::with_capacity(classes);
    let mut absent_classes = Vec::new();
    for c in 0..classes {
        let tp = cm.get(c, c);
        let support = cm.row_sum(c);
        let fp = cm.col_sum(c) - tp;
        let fn_ = support - tp;
        let tn = n - tp - fp - fn_;
        if support == 0 {
            absent_classes.push(c);
        }
        let sensitivity = (support > 0).then(|| tp as f64 / support as f64);
        let specificity = (tn + fp > 0).then(|| tn as f64 / (tn + fp) as f64);
        let f1 = (support > 0).then(|| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
        per_class.push(ClassMetrics {
            class: c,
            support,
            sensitivity,
            specificity,
            accuracy: (tp + tn) as f64 / n as f64,
            f1,
            auc: one_vs_rest_auc(records, c),
        });
    }
    let mean_of = |vals: Vec<f64>| -> Option<f64> {
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let correct = (0..classes).map(|c| cm.get(c, c)).sum::<usize>();
    Ok(Metrics {
        f1_macro: mean_of(per_class.iter().filter_map(|m| m.f1).collect()).unwrap_or(0.0),
        accuracy: correct as f64 / n as f64,
        balanced_accuracy: mean_of(per_class.iter().filter_map(|m| m.sensitivity).collect())
            .unwrap_or(0.0),
        mean_auc: mean_of(per_class.iter().filter_map(|m| m.auc).collect()),
        per_class,
        absent_classes,
        samples: n,
    })
}

/// Mann-Whitney estimate of P(score of a class-`c` sample > score of another
/// sample), ties counted one half. `None` without both positives and negatives.
pub fn one_vs_rest_auc(records: &[PredictionRecord], class: usize) -> Option<f64> {
    let scored: Vec<(f64, bool)> = records
        .iter()
        .map(|r| (r.score_mean[class], r.true_label == Some(class)))
        .collect();
    rank_auc(&scored)
}

/// AUC from `(score, is_positive)` pairs using mid-ranks for ties.
pub fn rank_auc(scored: &[(f64, bool)]) -> Option<f64> {
    let positives = scored.iter().filter(|s| s.1).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * sorted[i..=j].iter().filter(|s| s.1).count() as f64;
        i = j + 1;
    }
    let p = positives as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectionMode {
    /// Drop the lowest-confidence records overall.
    Global,
    /// Drop the lowest-confidence fraction within each predicted class.
    PerClass,
}

impl std::str::FromStr for RejectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(RejectionMode::Global),
            "per-class" => Ok(RejectionMode::PerClass),
            other => Err(Error::Config(format!("unknown rejection mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectionRow {
    pub ratio: f64,
    pub retained: usize,
    pub f1: f64,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectionCurve {
    pub mode: RejectionMode,
    pub rows: Vec<RejectionRow>,
}

/// `⌈(1 − ratio)·n⌉`, robust to the representation error of decimal ratios.
pub fn retained_count(n: usize, ratio: f64) -> usize {
    let exact = (1.0 - ratio) * n as f64;
    ((exact - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Records kept after rejecting `ratio` of them. Ties in confidence are broken
/// by `sample_id` ascending: of two equally confident records, the lower id
/// is rejected first.
pub fn retain_confident(
    records: &[PredictionRecord],
    ratio: f64,
    mode: RejectionMode,
) -> Result<Vec<PredictionRecord>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Range(format!("rejection ratio {ratio} outside [0, 1)")));
    }
    let order = |idx: &mut Vec<usize>| {
        idx.sort_by(|&a, &b| {
            records[a]
                .confidence
                .total_cmp(&records[b].confidence)
                .then(records[a].sample_id.cmp(&records[b].sample_id))
        })
    };
    let mut keep = vec![false; records.len()];
    match mode {
        RejectionMode::Global => {
            let mut idx: Vec<usize> = (0..records.len()).collect();
            order(&mut idx);
            let drop = records.len() - retained_count(records.len(), ratio);
            idx[drop..].iter().for_each(|&i| keep[i] = true);
        }
        RejectionMode::PerClass => {
            let classes = records.iter().map(|r| r.predicted_class + 1).max().unwrap_or(0);
            for c in 0..classes {
                let mut idx: Vec<usize> = (0..records.len())
                    .filter(|&i| records[i].predicted_class == c)
                    .collect();
                order(&mut idx);
                let drop = idx.len() - retained_count(idx.len(), ratio);
                idx[drop..].iter().for_each(|&i| keep[i] = true);
            }
        }
    }
    Ok(records
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(r, _)| r.clone())
        .collect())
}

pub fn rejection_curve(
    records: &[PredictionRecord],
    ratios: &[f64],
    mode: RejectionMode,
) -> Result<RejectionCurve> {
    if ratios.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Range("rejection ratios must be strictly increasing".into()));
    }
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let kept = retain_confident(records, ratio, mode)?;
        let m = metrics(&kept)?;
        rows.push(RejectionRow {
            ratio,
            retained: kept.len(),
            f1: m.f1_macro,
            accuracy: m.accuracy,
            balanced_accuracy: m.balanced_accuracy,
        });
    }
    Ok(RejectionCurve { mode, rows })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row: `f1,acc,bacc,mean_auc,samples`.
pub fn write_metrics_csv<W: Write>(m: &Metrics, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["f1", "acc", "bacc", "mean_auc", "samples"])
        .map_err(csv_err)?;
    w.write_record([
        m.f1_macro.to_string(),
        m.accuracy.to_string(),
        m.balanced_accuracy.to_string(),
        opt(m.mean_auc),
        m.samples.to_string(),
    ])
    .map_err(csv_err)?;
    w.flush()?;
    Ok(())
}

/// `class,support,sensitivity,specificity,accuracy,f1,auc`; undefined values
/// are empty fields.
pub fn write_per_class_csv<W: Write>(m: &Metrics, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["class", "support", "sensitivity", "specificity", "accuracy", "f1", "auc"])
        .map_err(csv_err)?;
    for c in &m.per_class {
        w.write_record([
            c.class.to_string(),
            c.support.to_string(),
            opt(c.sensitivity),
            opt(c.specificity),
            c.accuracy.to_string(),
            opt(c.f1),
            opt(c.auc),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `ratio,retained,f1,acc,bacc`
pub fn write_rejection_csv<W: Write>(curve: &RejectionCurve, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["ratio", "retained", "f1", "acc", "bacc"])
        .map_err(csv_err)?;
    for r in &curve.rows {
        w.write_record([
            r.ratio.to_string(),
            r.retained.to_string(),
            r.f1.to_string(),
            r.accuracy.to_string(),
            r.balanced_accuracy.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
