//! Confusion matrices and micro-averaged figures of merit.
//!
//! All multi-class metrics use pooled one-vs-rest (micro) averaging: each
//! scored sample contributes one binary decision per class, the binary
//! counts are pooled across the three classes, and the metric is computed
//! once from the pooled counts. For single-label 3-class data this yields
//! the identities
//!
//! ```text
//! SN = FS = top-1 accuracy        SP = (1 + SN) / 2       ACC = (1 + 2·SN) / 3
//! ```
//!
//! which the test suite checks against a brute-force binarization oracle.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::GradeLabel;

pub const N_CLASSES: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("prediction and truth lists have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no samples to score")]
    Empty,
    #[error("confusion matrix holds no samples")]
    EmptyMatrix,
    #[error("all pooled binary labels are identical; ROC undefined")]
    SingleClassDegenerate,
}

/// 3×3 confusion counts; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N_CLASSES]; N_CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn diagonal(&self) -> u64 {
        (0..N_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    /// Top-1 accuracy (diagonal mass over total).
    pub fn top1_accuracy(&self) -> f64 {
        self.diagonal() as f64 / self.total() as f64
    }
}

/// Micro-averaged report over a scored sample set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sn: f64,
    pub sp: f64,
    pub fs: f64,
    pub acc: f64,
    pub auc: f64,
    pub n_samples: usize,
}

pub fn confusion(
    predictions: &[GradeLabel],
    truths: &[GradeLabel],
) -> Result<ConfusionMatrix, MetricError> {
    if predictions.len() != truths.len() {
        return Err(MetricError::LengthMismatch(predictions.len(), truths.len()));
    }
    if predictions.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut counts = [[0u64; N_CLASSES]; N_CLASSES];
    for (&p, &t) in predictions.iter().zip(truths) {
        counts[t as usize][p as usize] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// Pooled one-vs-rest binary counts of a multi-class confusion matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PooledCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

pub fn pool_one_vs_rest(cm: &ConfusionMatrix) -> PooledCounts {
    let total = cm.total();
    let mut pooled = PooledCounts::default();
    for class in 0..N_CLASSES {
        let tp: u64 = cm.counts[class][class];
        let fn_: u64 = cm.counts[class].iter().sum::<u64>() - tp;
        let fp: u64 = (0..N_CLASSES).map(|t| cm.counts[t][class]).sum::<u64>() - tp;
        let tn = total - tp - fn_ - fp;
        pooled.tp += tp;
        pooled.fp += fp;
        pooled.tn += tn;
        pooled.fn_ += fn_;
    }
    pooled
}

/// Micro-averaged (SN, SP, FS, ACC) from a confusion matrix.
pub fn micro_metrics(cm: &ConfusionMatrix) -> Result<(f64, f64, f64, f64), MetricError> {
    if cm.total() == 0 {
        return Err(MetricError::EmptyMatrix);
    }
    let p = pool_one_vs_rest(cm);
    let (tp, fp, tn, fn_) = (p.tp as f64, p.fp as f64, p.tn as f64, p.fn_ as f64);
    let sn = tp / (tp + fn_);
    let sp = tn / (tn + fp);
    // harmonic mean of precision and recall, written so that zero true
    // positives give 0 rather than 0/0
    let fs = 2.0 * tp / (2.0 * tp + fp + fn_);
    let acc = (tp + tn) / (tp + tn + fp + fn_);
    Ok((sn, sp, fs, acc))
}

/// Micro one-vs-rest ROC AUC.
///
/// Every sample contributes one (score, label) pair per class; the pooled
/// binary pairs form a single ROC curve whose area is taken by the
/// trapezoidal rule with thresholds at distinct scores.
pub fn roc_auc_micro(
    scores: &[[f64; N_CLASSES]],
    truths: &[GradeLabel],
) -> Result<f64, MetricError> {
    if scores.len() != truths.len() {
        return Err(MetricError::LengthMismatch(scores.len(), truths.len()));
    }
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut pairs: Vec<(f64, bool)> = Vec::with_capacity(scores.len() * N_CLASSES);
    for (s, &t) in scores.iter().zip(truths) {
        for class in 0..N_CLASSES {
            pairs.push((s[class], class == t as usize));
        }
    }
    binary_auc(&pairs)
}

/// Trapezoidal ROC area over pooled binary (score, is_positive) pairs.
pub fn binary_auc(pairs: &[(f64, bool)]) -> Result<f64, MetricError> {
    let n_pos = pairs.iter().filter(|(_, p)| *p).count() as f64;
    let n_neg = pairs.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(MetricError::SingleClassDegenerate);
    }
    let mut sorted: Vec<(f64, bool)> = pairs.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut area = 0.0;
    let (mut tp, mut fp) = (0.0f64, 0.0f64);
    let (mut tp_prev, mut fp_prev) = (0.0f64, 0.0f64);
    let mut prev_score = f64::INFINITY;
    for &(score, positive) in &sorted {
        if score != prev_score {
            area += (fp - fp_prev) * (tp + tp_prev) / 2.0;
            tp_prev = tp;
            fp_prev = fp;
            prev_score = score;
        }
        if positive {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
    }
    area += (fp - fp_prev) * (tp + tp_prev) / 2.0;
    Ok(area / (n_pos * n_neg))
}

/// Full report: SN/SP/FS/ACC from argmax predictions plus micro AUC from
/// the probability scores.
pub fn score_predictions(
    scores: &[[f64; N_CLASSES]],
    truths: &[GradeLabel],
) -> Result<MetricReport, MetricError> {
    if scores.len() != truths.len() {
        return Err(MetricError::LengthMismatch(scores.len(), truths.len()));
    }
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    let predictions: Vec<GradeLabel> = scores.iter().map(|s| argmax_label(s)).collect();
    let cm = confusion(&predictions, truths)?;
    let (sn, sp, fs, acc) = micro_metrics(&cm)?;
    let auc = roc_auc_micro(scores, truths)?;
    Ok(MetricReport {
        sn,
        sp,
        fs,
        acc,
        auc,
        n_samples: truths.len(),
    })
}

/// Argmax with ties broken toward the lower class index.
pub fn argmax_label(scores: &[f64; N_CLASSES]) -> GradeLabel {
    let mut best = 0;
    for i in 1..N_CLASSES {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    GradeLabel::from_index(best).unwrap()
}

/// Per-metric mean and population standard deviation over CV folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvAggregate {
    pub sn: (f64, f64),
    pub sp: (f64, f64),
    pub fs: (f64, f64),
    pub acc: (f64, f64),
    pub auc: (f64, f64),
    pub n_folds: usize,
}

pub fn cross_val_aggregate(reports: &[MetricReport]) -> Result<CvAggregate, MetricError> {
    if reports.is_empty() {
        return Err(MetricError::Empty);
    }
    let stat = |take: fn(&MetricReport) -> f64| -> (f64, f64) {
        let k = reports.len() as f64;
        let mean = reports.iter().map(take).sum::<f64>() / k;
        let var = reports.iter().map(|r| (take(r) - mean).powi(2)).sum::<f64>() / k;
        (mean, var.sqrt())
    };
    Ok(CvAggregate {
        sn: stat(|r| r.sn),
        sp: stat(|r| r.sp),
        fs: stat(|r| r.fs),
        acc: stat(|r| r.acc),
        auc: stat(|r| r.auc),
        n_folds: reports.len(),
    })
}
