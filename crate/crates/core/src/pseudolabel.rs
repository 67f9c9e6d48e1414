//! Pseudo-labeling of the target pool and construction of the combined
//! stage-2 training set.
//!
//! A trained stage-1 model predicts a grade for every pool scan; the
//! predictions become ordinary (trainable) labels on those scans, while
//! the pool's real ground truth stays locked behind the evaluation guard
//! and is only consulted by the optional quality diagnostic.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, Domain, GradeLabel, GuardedLabel, Sample};
use crate::metrics::{argmax_label, score_predictions, MetricError, MetricReport};
use crate::model::{forward, ArchitectureGraph, ModelError, ModelParameters};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum PseudoLabelError {
    #[error("pseudo-label pool is empty")]
    EmptyPool,
    #[error("pseudo labels do not cover the pool: {0}")]
    CoverageMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// One pool scan's predicted grade with its class probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelEntry {
    pub image_id: String,
    pub patient_id: String,
    pub grade: GradeLabel,
    /// Probability of the predicted class.
    pub confidence: f64,
    pub probabilities: [f64; 3],
}

/// Predictions for a whole pool, in pool order.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub entries: Vec<PseudoLabelEntry>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries whose confidence reaches the threshold, pool order kept.
    pub fn thresholded(&self, threshold: f64) -> PseudoLabelSet {
        PseudoLabelSet {
            entries: self
                .entries
                .iter()
                .filter(|e| e.confidence >= threshold)
                .cloned()
                .collect(),
        }
    }
}

/// Run the model over every pool scan and keep the argmax grade together
/// with the full probability vector. The model is read-only here.
pub fn predict_pseudo_labels<T: Scalar>(
    graph: &ArchitectureGraph,
    params: &ModelParameters<T>,
    pool: &Dataset,
) -> Result<PseudoLabelSet, PseudoLabelError> {
    if pool.samples.is_empty() {
        return Err(PseudoLabelError::EmptyPool);
    }
    let scans: Vec<_> = pool.samples.iter().map(|s| s.scan.clone()).collect();
    let traces = forward(params, graph, &scans)?;
    let entries = pool
        .samples
        .iter()
        .zip(&traces)
        .map(|(s, t)| {
            let probabilities = [
                t.probabilities[0].to_f64_lossy(),
                t.probabilities[1].to_f64_lossy(),
                t.probabilities[2].to_f64_lossy(),
            ];
            let grade = argmax_label(&probabilities);
            PseudoLabelEntry {
                image_id: s.scan.image_id.clone(),
                patient_id: s.scan.patient_id.clone(),
                grade,
                confidence: probabilities[grade.index()],
                probabilities,
            }
        })
        .collect();
    Ok(PseudoLabelSet { entries })
}

/// Replace every scan's prediction by its patient's consensus: the class
/// probabilities of all scans belonging to one patient are averaged and the
/// argmax of that mean is assigned to each of them. A glaucoma grade is a
/// patient-level diagnosis, so scans of one patient must carry the same
/// grade; soft-voting across a patient's scans also cancels per-scan
/// prediction flips, which makes the consensus labels more accurate than
/// the individual ones.
pub fn patient_consensus(labels: &PseudoLabelSet) -> PseudoLabelSet {
    let mut sums: BTreeMap<&str, ([f64; 3], usize)> = BTreeMap::new();
    for e in &labels.entries {
        let slot = sums.entry(e.patient_id.as_str()).or_insert(([0.0; 3], 0));
        for k in 0..3 {
            slot.0[k] += e.probabilities[k];
        }
        slot.1 += 1;
    }
    let entries = labels
        .entries
        .iter()
        .map(|e| {
            let (sum, n) = &sums[e.patient_id.as_str()];
            let probabilities = [
                sum[0] / *n as f64,
                sum[1] / *n as f64,
                sum[2] / *n as f64,
            ];
            let grade = argmax_label(&probabilities);
            PseudoLabelEntry {
                image_id: e.image_id.clone(),
                patient_id: e.patient_id.clone(),
                grade,
                confidence: probabilities[grade.index()],
                probabilities,
            }
        })
        .collect();
    PseudoLabelSet { entries }
}

/// Provenance of one sample in the combined training set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    SourceGroundTruth,
    TargetPseudo,
}

/// Labeled source data plus pseudo-labeled target data, ready for stage-2
/// training. Per-scan domains still record where each scan came from.
#[derive(Clone, Debug)]
pub struct AugmentedDataset {
    pub dataset: Dataset,
    pub provenance: Vec<Provenance>,
    pub n_source: usize,
    pub n_pseudo: usize,
    /// Pool entries dropped by the confidence threshold.
    pub n_discarded: usize,
}

/// Merge the source set with the pseudo-labeled pool (source samples
/// first). Every pool scan must have a prediction; entries below the
/// confidence threshold are dropped. The pool's ground-truth labels are
/// replaced by the open pseudo labels, so the result is fully trainable.
pub fn augment_dataset(
    source: &Dataset,
    pool: &Dataset,
    labels: &PseudoLabelSet,
    confidence_threshold: f64,
) -> Result<AugmentedDataset, PseudoLabelError> {
    let by_id: BTreeMap<&str, &PseudoLabelEntry> = labels
        .entries
        .iter()
        .map(|e| (e.image_id.as_str(), e))
        .collect();
    let pool_ids: HashSet<&str> = pool
        .samples
        .iter()
        .map(|s| s.scan.image_id.as_str())
        .collect();
    for s in &pool.samples {
        if !by_id.contains_key(s.scan.image_id.as_str()) {
            return Err(PseudoLabelError::CoverageMismatch(format!(
                "pool scan '{}' has no pseudo label",
                s.scan.image_id
            )));
        }
    }
    for id in by_id.keys() {
        if !pool_ids.contains(id) {
            return Err(PseudoLabelError::CoverageMismatch(format!(
                "pseudo label for '{id}' names no pool scan"
            )));
        }
    }

    let mut samples = Vec::with_capacity(source.samples.len() + pool.samples.len());
    let mut provenance = Vec::with_capacity(samples.capacity());
    for s in &source.samples {
        // fail fast if a supposedly labeled source sample is not trainable
        s.training_label()?;
        samples.push(s.clone());
        provenance.push(Provenance::SourceGroundTruth);
    }
    let n_source = samples.len();
    let mut n_discarded = 0;
    for s in &pool.samples {
        let entry = by_id[s.scan.image_id.as_str()];
        if entry.confidence < confidence_threshold {
            n_discarded += 1;
            continue;
        }
        samples.push(Sample {
            scan: s.scan.clone(),
            label: Some(GuardedLabel::open(entry.grade)),
        });
        provenance.push(Provenance::TargetPseudo);
    }
    let n_pseudo = samples.len() - n_source;
    Ok(AugmentedDataset {
        // the union acts as labeled training data; individual scans keep
        // their own domain tags
        dataset: Dataset::new(samples, Domain::Source),
        provenance,
        n_source,
        n_pseudo,
        n_discarded,
    })
}

/// Score the pseudo labels against the pool's held ground truth. Purely
/// diagnostic: the truth is read under evaluation access and nothing of
/// it flows back into the labels.
pub fn pseudo_label_quality(
    labels: &PseudoLabelSet,
    pool: &Dataset,
) -> Result<MetricReport, PseudoLabelError> {
    let by_id: BTreeMap<&str, &PseudoLabelEntry> = labels
        .entries
        .iter()
        .map(|e| (e.image_id.as_str(), e))
        .collect();
    let mut scores = Vec::with_capacity(pool.samples.len());
    let mut truths = Vec::with_capacity(pool.samples.len());
    for s in &pool.samples {
        let entry = by_id.get(s.scan.image_id.as_str()).ok_or_else(|| {
            PseudoLabelError::CoverageMismatch(format!(
                "pool scan '{}' has no pseudo label",
                s.scan.image_id
            ))
        })?;
        scores.push(entry.probabilities);
        truths.push(s.eval_label()?);
    }
    Ok(score_predictions(&scores, &truths)?)
}

/// Write predictions as CSV:
/// `image_id,pseudo_grade,confidence,p_healthy,p_early,p_advanced`.
pub fn write_pseudo_csv(labels: &PseudoLabelSet, path: &Path) -> Result<(), PseudoLabelError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "image_id",
        "pseudo_grade",
        "confidence",
        "p_healthy",
        "p_early",
        "p_advanced",
    ])?;
    for e in &labels.entries {
        w.write_record([
            e.image_id.clone(),
            e.grade.index().to_string(),
            format!("{:.6}", e.confidence),
            format!("{:.6}", e.probabilities[0]),
            format!("{:.6}", e.probabilities[1]),
            format!("{:.6}", e.probabilities[2]),
        ])?;
    }
    w.flush()?;
    Ok(())
}
