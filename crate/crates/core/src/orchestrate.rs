//! End-to-end experiment runner: the four self-training configurations
//! (baseline / proposed / lower bound / upper bound) plus a backbone
//! comparison, on manifest-backed or synthetic dataset pairs.
//!
//! Mode semantics:
//! - `baseline` — k-fold CV on the labeled source set; the fold model
//!   with the highest validation accuracy is evaluated on the target
//!   test split.
//! - `proposed` — baseline stage, then the best fold model pseudo-labels
//!   the target pool; a freshly initialized model trains on the union of
//!   the full source set and the pseudo-labeled pool.
//! - `lower_bound` — a fresh model trains on the pseudo-labeled pool only.
//! - `upper_bound` — a fresh model trains on the source set plus the pool
//!   with its true labels explicitly unlocked (full-supervision reference).
//! - `backbone_compare` — source-only CV of the two plain VGG baselines
//!   and both RAGNet_v2 variants.
//!
//! True target labels stay behind the evaluation guard in the first three
//! modes, so any accidental training-time read fails the run instead of
//! silently leaking.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::synth::{generate_synthetic, SynthConfig};
use crate::dataset::{load_manifest_with_shape, Dataset, DatasetError};
use crate::metrics::{cross_val_aggregate, score_predictions, CvAggregate, MetricError, MetricReport};
use crate::model::{
    build_graph, build_model, ArchConfig, ArchVariant, ArchitectureGraph, Backbone, ModelError,
};
use crate::pseudolabel::{
    augment_dataset, patient_consensus, predict_pseudo_labels, pseudo_label_quality,
    PseudoLabelError, PseudoLabelSet,
};
use crate::scalar::Real;
use crate::splits::{make_cv_folds, materialize, split_target, SplitError};
use crate::train::{
    evaluate, predict_probabilities, train_model, TrainError, TrainOutcome, TrainingConfig,
};

#[derive(Debug, Error)]
pub enum OrchestrateError {
    #[error("unknown experiment mode '{0}'")]
    UnknownMode(String),
    #[error("results cover different target test splits")]
    MismatchedTestSplit,
    #[error("comparison needs at least two results")]
    NotEnoughResults,
    #[error("no baseline row to take deltas against")]
    MissingBaseline,
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    PseudoLabel(#[from] PseudoLabelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentMode {
    Baseline,
    Proposed,
    LowerBound,
    UpperBound,
    BackboneCompare,
}

impl FromStr for ExperimentMode {
    type Err = OrchestrateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "proposed" => Ok(Self::Proposed),
            "lower_bound" => Ok(Self::LowerBound),
            "upper_bound" => Ok(Self::UpperBound),
            "backbone_compare" => Ok(Self::BackboneCompare),
            other => Err(OrchestrateError::UnknownMode(other.to_string())),
        }
    }
}

impl fmt::Display for ExperimentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Baseline => "baseline",
            Self::Proposed => "proposed",
            Self::LowerBound => "lower_bound",
            Self::UpperBound => "upper_bound",
            Self::BackboneCompare => "backbone_compare",
        };
        f.write_str(s)
    }
}

/// All random seeds an experiment consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub split: u64,
    pub init: u64,
    pub shuffle: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            split: 0,
            init: 1,
            shuffle: 2,
        }
    }
}

/// Where the source/target dataset pair comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    Manifests {
        source: PathBuf,
        target: PathBuf,
    },
    Synthetic {
        config: SynthConfig,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: ExperimentMode,
    pub arch: ArchConfig,
    pub data: DataSource,
    pub training: TrainingConfig,
    pub seeds: Seeds,
    pub n_folds: usize,
    /// Fraction of target patients assigned to the pseudo-label pool.
    pub target_pool_fraction: f64,
    /// Minimum pseudo-label confidence kept in the stage-2 set.
    pub confidence_threshold: f64,
}

impl ExperimentConfig {
    /// Canonical hash of the configuration for provenance records.
    pub fn hash(&self) -> Result<String, OrchestrateError> {
        let json = serde_json::to_string(self)?;
        let digest = Sha256::digest(json.as_bytes());
        Ok(format!("{digest:x}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub mode: ExperimentMode,
    pub config_hash: String,
    pub seeds: Seeds,
    /// Held-out target test metrics (absent for backbone_compare).
    pub test: Option<MetricReport>,
    /// Stage-1 cross-validation aggregate.
    pub cv: Option<CvAggregate>,
    pub best_fold: Option<usize>,
    /// Diagnostic accuracy of the pseudo labels against the held truth.
    pub pseudo_quality: Option<MetricReport>,
    pub stage2_train_size: Option<usize>,
    /// Patients of the target test split, sorted.
    pub test_patients: Vec<String>,
    /// Per-architecture CV aggregates (backbone_compare only).
    pub backbone_compare: Option<BTreeMap<String, CvAggregate>>,
}

/// Load or generate the (source, target) pair at the architecture's input
/// resolution.
pub fn resolve_data(config: &ExperimentConfig) -> Result<(Dataset, Dataset), OrchestrateError> {
    match &config.data {
        DataSource::Manifests { source, target } => Ok((
            load_manifest_with_shape(source, config.arch.input_shape)?,
            load_manifest_with_shape(target, config.arch.input_shape)?,
        )),
        DataSource::Synthetic { config: synth } => {
            if synth.image_shape != config.arch.input_shape {
                return Err(OrchestrateError::ConfigMismatch(format!(
                    "synthetic image shape {:?} vs architecture input {:?}",
                    synth.image_shape, config.arch.input_shape
                )));
            }
            Ok(generate_synthetic(synth)?)
        }
    }
}

/// A run whose final-epoch mean training loss stays above this is treated as
/// a collapsed optimization (the network got stuck predicting a constant or
/// ignoring one class entirely; a healthy run at these data sizes ends far
/// below) and is restarted with a perturbed seed.
const DEAD_INIT_LOSS: f64 = 0.5;
const MAX_RESTARTS: u64 = 3;

/// Train with deterministic restarts: rarely, an initialization leaves the
/// network in a constant-output state that Adadelta never escapes. Detect
/// this from the final training loss and retry with an offset init seed.
fn train_with_restarts(
    arch: &ArchConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    init_seed: u64,
    tc: &TrainingConfig,
) -> Result<(ArchitectureGraph, TrainOutcome<Real>), OrchestrateError> {
    let mut last = None;
    for attempt in 0..=MAX_RESTARTS {
        let seed = init_seed.wrapping_add(attempt.wrapping_mul(1000));
        let (graph, params) = build_model::<Real>(arch, None, seed)?;
        let outcome = train_model(&graph, &params, train_set, val_set, tc)?;
        let final_loss = outcome
            .trace
            .last()
            .map_or(0.0, |r| r.mean_loss);
        let dead = tc.epochs > 0 && final_loss >= DEAD_INIT_LOSS;
        last = Some((graph, outcome));
        if !dead {
            break;
        }
    }
    Ok(last.expect("at least one attempt ran"))
}

pub struct CvOutcome {
    pub fold_reports: Vec<MetricReport>,
    pub best_fold: usize,
    pub best: TrainOutcome<Real>,
    /// Validation subset of the best fold.
    pub best_val: Dataset,
}

/// Stage-1 k-fold cross-validation; best fold by validation accuracy,
/// ties to the lowest fold index.
pub fn run_cv(
    arch: &ArchConfig,
    source: &Dataset,
    config: &ExperimentConfig,
) -> Result<CvOutcome, OrchestrateError> {
    let plan = make_cv_folds(source, config.n_folds, config.seeds.split)?;
    let mut fold_reports = Vec::with_capacity(plan.k());
    let mut best: Option<(usize, TrainOutcome<Real>, Dataset)> = None;
    for fold in 0..plan.k() {
        let (train, val) = materialize(source, &plan, fold)?;
        let tc = TrainingConfig {
            shuffle_seed: config.seeds.shuffle.wrapping_add(fold as u64),
            ..config.training.clone()
        };
        let (graph, outcome) = train_with_restarts(
            arch,
            &train,
            &val,
            config.seeds.init.wrapping_add(fold as u64),
            &tc,
        )?;
        let report = evaluate(&graph, &outcome.best_params, &val)?;
        let replace = best
            .as_ref()
            .map_or(true, |(_, b, _)| outcome.best_val_acc > b.best_val_acc);
        fold_reports.push(report);
        if replace {
            best = Some((fold, outcome, val));
        }
    }
    let (best_fold, best, best_val) = best.expect("k >= 2 folds ran");
    Ok(CvOutcome {
        fold_reports,
        best_fold,
        best,
        best_val,
    })
}

/// Number of independently initialized stage-2 runs whose predicted
/// probabilities are averaged. Stage 1 controls its init variance by
/// selecting the best of k folds; stage 2 is one training configuration,
/// so a small init ensemble plays the same role there.
const STAGE2_ENSEMBLE: u64 = 2;

/// Train freshly initialized models on `train_set` and evaluate their
/// averaged predictions on the target test split.
fn stage2(
    arch: &ArchConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    test_set: &Dataset,
    config: &ExperimentConfig,
) -> Result<MetricReport, OrchestrateError> {
    let mut mean_scores = vec![[0.0f64; 3]; test_set.n_samples()];
    for member in 0..STAGE2_ENSEMBLE {
        let tc = TrainingConfig {
            shuffle_seed: config.seeds.shuffle.wrapping_add(101 + member),
            ..config.training.clone()
        };
        let (graph, outcome) = train_with_restarts(
            arch,
            train_set,
            val_set,
            config.seeds.init.wrapping_add(101 + member),
            &tc,
        )?;
        // the source validation subset saturates quickly in stage 2, so the
        // best-validation snapshot would systematically pick an undertrained
        // early epoch; the fully trained parameters are evaluated instead
        let scores = predict_probabilities(&graph, &outcome.final_params, test_set)?;
        for (acc, s) in mean_scores.iter_mut().zip(&scores) {
            for k in 0..3 {
                acc[k] += s[k] / STAGE2_ENSEMBLE as f64;
            }
        }
    }
    let truths = test_set
        .samples
        .iter()
        .map(|s| s.eval_label())
        .collect::<Result<Vec<_>, _>>()
        .map_err(TrainError::from)?;
    Ok(score_predictions(&mean_scores, &truths)?)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, OrchestrateError> {
    let (source, target) = resolve_data(config)?;
    let config_hash = config.hash()?;
    let mut result = ExperimentResult {
        mode: config.mode,
        config_hash,
        seeds: config.seeds,
        test: None,
        cv: None,
        best_fold: None,
        pseudo_quality: None,
        stage2_train_size: None,
        test_patients: Vec::new(),
        backbone_compare: None,
    };

    if config.mode == ExperimentMode::BackboneCompare {
        let mut table = BTreeMap::new();
        for (name, variant, backbone) in [
            ("vgg16", ArchVariant::VggBaseline, Backbone::Vgg16),
            ("vgg19", ArchVariant::VggBaseline, Backbone::Vgg19),
            ("ragnet_v2_vgg16", ArchVariant::RagnetV2, Backbone::Vgg16),
            ("ragnet_v2_vgg19", ArchVariant::RagnetV2, Backbone::Vgg19),
        ] {
            let arch = ArchConfig {
                variant,
                backbone,
                ..config.arch.clone()
            };
            let cv = run_cv(&arch, &source, config)?;
            table.insert(name.to_string(), cross_val_aggregate(&cv.fold_reports)?);
        }
        result.backbone_compare = Some(table);
        return Ok(result);
    }

    let target_split = split_target(&target, config.target_pool_fraction, config.seeds.split)?;
    let pool = target.subset_by_patients(
        &target_split.pseudo_pool_patients.iter().cloned().collect(),
    );
    let test_set =
        target.subset_by_patients(&target_split.test_patients.iter().cloned().collect());
    result.test_patients = {
        let mut p = target_split.test_patients.clone();
        p.sort();
        p
    };

    match config.mode {
        ExperimentMode::Baseline => {
            let cv = run_cv(&config.arch, &source, config)?;
            let graph = build_graph(&config.arch)?;
            result.test = Some(evaluate(&graph, &cv.best.best_params, &test_set)?);
            result.cv = Some(cross_val_aggregate(&cv.fold_reports)?);
            result.best_fold = Some(cv.best_fold);
        }
        ExperimentMode::Proposed | ExperimentMode::LowerBound => {
            let cv = run_cv(&config.arch, &source, config)?;
            let graph = build_graph(&config.arch)?;
            let pseudo: PseudoLabelSet = patient_consensus(&predict_pseudo_labels(
                &graph,
                &cv.best.best_params,
                &pool,
            )?);
            // the lower bound trains on the raw pseudo-labeled pool alone:
            // no source data and no confidence filtering, so it shows what
            // the pseudo labels are worth without any anchoring
            let (stage1_source, threshold) = if config.mode == ExperimentMode::Proposed {
                (source.clone(), config.confidence_threshold)
            } else {
                (Dataset::new(Vec::new(), source.domain), 0.0)
            };
            let aug = augment_dataset(&stage1_source, &pool, &pseudo, threshold)?;
            result.test = Some(stage2(
                &config.arch,
                &aug.dataset,
                &cv.best_val,
                &test_set,
                config,
            )?);
            result.cv = Some(cross_val_aggregate(&cv.fold_reports)?);
            result.best_fold = Some(cv.best_fold);
            result.stage2_train_size = Some(aug.dataset.n_samples());
            result.pseudo_quality = Some(pseudo_label_quality(&pseudo, &pool)?);
        }
        ExperimentMode::UpperBound => {
            // full supervision: pool ground truth is explicitly unlocked
            let mut samples = source.samples.clone();
            samples.extend(pool.with_labels_unlocked().samples);
            let train_set = Dataset::new(samples, source.domain);
            // validation subset: fold 0 of the source split plan
            let plan = make_cv_folds(&source, config.n_folds, config.seeds.split)?;
            let (_, val_set) = materialize(&source, &plan, 0)?;
            result.test = Some(stage2(
                &config.arch,
                &train_set,
                &val_set,
                &test_set,
                config,
            )?);
            result.stage2_train_size = Some(train_set.n_samples());
        }
        ExperimentMode::BackboneCompare => unreachable!(),
    }
    Ok(result)
}

/// Serialize a result as canonical pretty JSON (struct field order plus
/// sorted maps make equal results byte-identical).
pub fn result_to_json(result: &ExperimentResult) -> Result<String, OrchestrateError> {
    let mut json = serde_json::to_string_pretty(result)?;
    json.push('\n');
    Ok(json)
}

pub fn write_result_json(result: &ExperimentResult, path: &Path) -> Result<(), OrchestrateError> {
    std::fs::write(path, result_to_json(result)?)?;
    Ok(())
}

/// One comparison row: absolute metrics plus deltas against baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub mode: ExperimentMode,
    pub report: MetricReport,
    pub delta_sn: f64,
    pub delta_sp: f64,
    pub delta_fs: f64,
    pub delta_acc: f64,
    pub delta_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

/// Order the results baseline / proposed / lower / upper and compute
/// per-metric deltas against the baseline row. All results must cover the
/// same target test split.
pub fn compare_report(results: &[ExperimentResult]) -> Result<ComparisonTable, OrchestrateError> {
    if results.len() < 2 {
        return Err(OrchestrateError::NotEnoughResults);
    }
    let reference_patients = &results[0].test_patients;
    for r in results {
        if &r.test_patients != reference_patients {
            return Err(OrchestrateError::MismatchedTestSplit);
        }
    }
    let mut ordered: Vec<&ExperimentResult> = results
        .iter()
        .filter(|r| r.test.is_some())
        .collect();
    ordered.sort_by_key(|r| match r.mode {
        ExperimentMode::Baseline => 0,
        ExperimentMode::Proposed => 1,
        ExperimentMode::LowerBound => 2,
        ExperimentMode::UpperBound => 3,
        ExperimentMode::BackboneCompare => 4,
    });
    let baseline = ordered
        .iter()
        .find(|r| r.mode == ExperimentMode::Baseline)
        .map(|r| r.test.clone().unwrap())
        .ok_or(OrchestrateError::MissingBaseline)?;
    let rows = ordered
        .into_iter()
        .map(|r| {
            let report = r.test.clone().unwrap();
            ComparisonRow {
                mode: r.mode,
                delta_sn: report.sn - baseline.sn,
                delta_sp: report.sp - baseline.sp,
                delta_fs: report.fs - baseline.fs,
                delta_acc: report.acc - baseline.acc,
                delta_auc: report.auc - baseline.auc,
                report,
            }
        })
        .collect();
    Ok(ComparisonTable { rows })
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8}",
            "mode", "SN", "SP", "FS", "ACC", "AUC", "dACC"
        )?;
        for row in &self.rows {
            writeln!(
                f,
                "{:<16} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>+8.4}",
                row.mode.to_string(),
                row.report.sn,
                row.report.sp,
                row.report.fs,
                row.report.acc,
                row.report.auc,
                row.delta_acc,
            )?;
        }
        Ok(())
    }
}
