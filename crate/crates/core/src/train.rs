//! Mini-batch cross-entropy training with Adadelta updates over the
//! unfrozen parameter set.
//!
//! Per epoch: seeded shuffle, mini-batches (the short remainder batch is
//! kept), forward, mean cross-entropy, backward, one Adadelta step per
//! batch on trainable layers only. Validation metrics are recorded after
//! every epoch for monitoring; training never halts early.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError};
use crate::metrics::{score_predictions, MetricError, MetricReport};
use crate::model::bundle::{BundleError, WeightBundle};
use crate::model::{
    run_backward, run_forward, scan_to_input, softmax, ArchitectureGraph, Gradients, ModelError,
    ModelParameters,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor3;

/// Probabilities are clamped at this floor before the log.
pub const LOSS_CLAMP_FLOOR: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("label vector is not one-hot")]
    NotOneHot,
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("validation set is empty")]
    EmptyValSet,
    #[error("gradient/parameter shape mismatch")]
    ShapeMismatch,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Adadelta decay rho.
    pub rho: f64,
    /// Adadelta stabilizer added inside both square roots.
    pub eps_opt: f64,
    /// Scale applied to the Adadelta update.
    pub lr_scale: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            rho: 0.95,
            eps_opt: 1e-6,
            lr_scale: 1.0,
            shuffle_seed: 0,
        }
    }
}

/// Categorical cross-entropy with the probability clamped below at 1e-7.
pub fn cross_entropy<T: Scalar>(y: &[T; 3], y_hat: &[T]) -> Result<T, TrainError> {
    let ones = y.iter().filter(|&&v| v == T::one()).count();
    let zeros = y.iter().filter(|&&v| v == T::zero()).count();
    if ones != 1 || zeros != 2 {
        return Err(TrainError::NotOneHot);
    }
    let floor = T::from_f64_lossy(LOSS_CLAMP_FLOOR);
    let mut loss = T::zero();
    for (&yi, &pi) in y.iter().zip(y_hat) {
        if yi == T::one() {
            loss = -pi.max(floor).ln();
        }
    }
    Ok(loss)
}

/// Per-layer Adadelta accumulators (EMA of squared gradients and updates).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdadeltaSlot<T> {
    pub eg2_weights: Vec<T>,
    pub ed2_weights: Vec<T>,
    pub eg2_bias: Vec<T>,
    pub ed2_bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState<T> {
    pub layers: Vec<Option<AdadeltaSlot<T>>>,
}

impl<T: Scalar> OptimizerState<T> {
    /// Fresh zeroed accumulators for every trainable layer.
    pub fn new(params: &ModelParameters<T>) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().filter(|l| !l.frozen).map(|l| AdadeltaSlot {
                        eg2_weights: vec![T::zero(); l.weights.len()],
                        ed2_weights: vec![T::zero(); l.weights.len()],
                        eg2_bias: vec![T::zero(); l.bias.len()],
                        ed2_bias: vec![T::zero(); l.bias.len()],
                    })
                })
                .collect(),
        }
    }
}

/// Single-scalar Adadelta update rule:
/// `E[g²] ← ρE[g²]+(1−ρ)g²`, `Δ = −√(E[Δ²]+ε)/√(E[g²]+ε)·g`,
/// `E[Δ²] ← ρE[Δ²]+(1−ρ)Δ²`, `w ← w + scale·Δ`.
#[inline]
fn adadelta_scalar<T: Scalar>(w: &mut T, g: T, eg2: &mut T, ed2: &mut T, rho: T, eps: T, scale: T) {
    *eg2 = rho * *eg2 + (T::one() - rho) * g * g;
    let delta = -((*ed2 + eps).sqrt() / (*eg2 + eps).sqrt()) * g;
    *ed2 = rho * *ed2 + (T::one() - rho) * delta * delta;
    *w += scale * delta;
}

/// Apply one Adadelta step to all trainable layers.
pub fn adadelta_step<T: Scalar>(
    params: &mut ModelParameters<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    config: &TrainingConfig,
) -> Result<(), TrainError> {
    let rho = T::from_f64_lossy(config.rho);
    let eps = T::from_f64_lossy(config.eps_opt);
    let scale = T::from_f64_lossy(config.lr_scale);
    for ((lp, lg), slot) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.layers)
    {
        let (Some(lp), Some(lg), Some(slot)) = (lp.as_mut(), lg.as_ref(), slot.as_mut()) else {
            continue;
        };
        if lp.frozen {
            continue;
        }
        if lp.weights.len() != lg.d_weights.len() || lp.bias.len() != lg.d_bias.len() {
            return Err(TrainError::ShapeMismatch);
        }
        for i in 0..lp.weights.len() {
            adadelta_scalar(
                &mut lp.weights[i],
                lg.d_weights[i],
                &mut slot.eg2_weights[i],
                &mut slot.ed2_weights[i],
                rho,
                eps,
                scale,
            );
        }
        for i in 0..lp.bias.len() {
            adadelta_scalar(
                &mut lp.bias[i],
                lg.d_bias[i],
                &mut slot.eg2_bias[i],
                &mut slot.ed2_bias[i],
                rho,
                eps,
                scale,
            );
        }
    }
    Ok(())
}

/// One epoch record of the training trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val: MetricReport,
}

pub type TrainingTrace = Vec<EpochRecord>;

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub final_params: ModelParameters<T>,
    /// Snapshot at the epoch with the highest validation accuracy
    /// (earliest epoch on ties). Equals `final_params` when epochs = 0.
    pub best_params: ModelParameters<T>,
    pub best_epoch: Option<usize>,
    pub best_val_acc: f64,
    pub trace: TrainingTrace,
}

/// Forward + loss + backward for one labeled sample.
pub fn loss_and_grads<T: Scalar>(
    graph: &ArchitectureGraph,
    params: &ModelParameters<T>,
    input: &Tensor3<T>,
    label: usize,
) -> Result<(T, Gradients<T>), TrainError> {
    let acts = run_forward(graph, params, input.clone())?;
    let logits = acts.logits(graph);
    let probs = softmax(logits)?;
    let mut one_hot = [T::zero(); 3];
    one_hot[label] = T::one();
    let loss = cross_entropy(&one_hot, &probs)?;
    // fused softmax + cross-entropy gradient
    let d_logits: Vec<T> = probs
        .iter()
        .zip(&one_hot)
        .map(|(&p, &y)| p - y)
        .collect();
    Ok((loss, run_backward(graph, params, &acts, &d_logits)))
}

/// Probability vectors for every sample of a dataset, in order.
pub fn predict_probabilities<T: Scalar>(
    graph: &ArchitectureGraph,
    params: &ModelParameters<T>,
    dataset: &Dataset,
) -> Result<Vec<[f64; 3]>, TrainError> {
    dataset
        .samples
        .par_iter()
        .map(|s| {
            let acts = run_forward(graph, params, scan_to_input::<T>(&s.scan))?;
            let probs = softmax(acts.logits(graph))?;
            Ok([
                probs[0].to_f64_lossy(),
                probs[1].to_f64_lossy(),
                probs[2].to_f64_lossy(),
            ])
        })
        .collect()
}

/// Evaluate a model on a labeled dataset (evaluation-time label access).
pub fn evaluate<T: Scalar>(
    graph: &ArchitectureGraph,
    params: &ModelParameters<T>,
    dataset: &Dataset,
) -> Result<MetricReport, TrainError> {
    let scores = predict_probabilities(graph, params, dataset)?;
    let truths = dataset
        .samples
        .iter()
        .map(|s| s.eval_label())
        .collect::<Result<Vec<_>, _>>()?;
    Ok(score_predictions(&scores, &truths)?)
}

/// Full training loop. Training labels are read through the access guard,
/// so an eval-only label in the train set aborts with `LabelLeakage`.
pub fn train_model<T: Scalar>(
    graph: &ArchitectureGraph,
    params: &ModelParameters<T>,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainingConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    if train_set.samples.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    if val_set.samples.is_empty() && config.epochs > 0 {
        return Err(TrainError::EmptyValSet);
    }
    let inputs: Vec<(Tensor3<T>, usize)> = train_set
        .samples
        .iter()
        .map(|s| Ok((scan_to_input::<T>(&s.scan), s.training_label()?.index())))
        .collect::<Result<_, TrainError>>()?;

    let mut params = params.clone();
    let mut state = OptimizerState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    let mut trace = TrainingTrace::new();
    let mut best: Option<(usize, f64, ModelParameters<T>)> = None;
    let n = inputs.len();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(config.batch_size.max(1)) {
            // per-sample gradients in parallel, reduced in batch order so
            // the accumulation is bit-reproducible
            let results: Vec<(T, Gradients<T>)> = batch
                .par_iter()
                .map(|&i| loss_and_grads(graph, &params, &inputs[i].0, inputs[i].1))
                .collect::<Result<_, _>>()?;
            let mut total = Gradients::zeros_like(&params);
            for (loss, g) in &results {
                loss_sum += loss.to_f64_lossy();
                total.add_assign(g);
            }
            total.scale(T::one() / T::from_usize(batch.len()).unwrap());
            adadelta_step(&mut params, &total, &mut state, config)?;
        }
        let val = evaluate(graph, &params, val_set)?;
        if best.as_ref().map_or(true, |(_, acc, _)| val.acc > *acc) {
            best = Some((epoch, val.acc, params.clone()));
        }
        trace.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / n as f64,
            val,
        });
    }

    let (best_epoch, best_val_acc, best_params) = match best {
        Some((e, acc, p)) => (Some(e), acc, p),
        None => (None, 0.0, params.clone()),
    };
    Ok(TrainOutcome {
        final_params: params,
        best_params,
        best_epoch,
        best_val_acc,
        trace,
    })
}

/// Checkpoint layout: `weights/` bundle, `opt_eg2/` + `opt_ed2/` bundles
/// holding the Adadelta accumulators, and `checkpoint.json` with the
/// training config and epoch count.
#[derive(Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainingConfig,
    pub epochs_completed: usize,
}

pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    graph: &ArchitectureGraph,
    params: &ModelParameters<T>,
    state: Option<&OptimizerState<T>>,
    meta: &CheckpointMeta,
) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir)?;
    WeightBundle::from_params(graph, params).save(&dir.join("weights"))?;
    if let Some(state) = state {
        let (eg2, ed2) = optimizer_bundles(graph, params, state);
        eg2.save(&dir.join("opt_eg2"))?;
        ed2.save(&dir.join("opt_ed2"))?;
    }
    std::fs::write(dir.join("graph.json"), serde_json::to_vec_pretty(graph)?)?;
    std::fs::write(dir.join("checkpoint.json"), serde_json::to_vec_pretty(meta)?)?;
    Ok(())
}

fn optimizer_bundles<T: Scalar>(
    graph: &ArchitectureGraph,
    params: &ModelParameters<T>,
    state: &OptimizerState<T>,
) -> (WeightBundle, WeightBundle) {
    let mut eg2 = ModelParameters {
        layers: params.layers.clone(),
    };
    let mut ed2 = ModelParameters {
        layers: params.layers.clone(),
    };
    for (i, slot) in state.layers.iter().enumerate() {
        if let Some(slot) = slot {
            if let Some(l) = eg2.layers[i].as_mut() {
                l.weights = slot.eg2_weights.clone();
                l.bias = slot.eg2_bias.clone();
            }
            if let Some(l) = ed2.layers[i].as_mut() {
                l.weights = slot.ed2_weights.clone();
                l.bias = slot.ed2_bias.clone();
            }
        } else {
            eg2.layers[i] = None;
            ed2.layers[i] = None;
        }
    }
    (
        WeightBundle::from_params(graph, &eg2),
        WeightBundle::from_params(graph, &ed2),
    )
}

/// Emit the training trace as JSON lines, one record per epoch.
pub fn write_trace_jsonl(trace: &TrainingTrace, path: &Path) -> Result<(), TrainError> {
    let mut out = String::new();
    for record in trace {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::{generate_synthetic, SynthConfig};
    use crate::dataset::GradeLabel;
    use crate::model::{build_model, ArchConfig, ArchVariant, Backbone};
    use crate::splits::{make_cv_folds, materialize};

    #[test]
    fn cross_entropy_certain_prediction_is_zero() {
        let loss = cross_entropy(&[1.0f64, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap();
        assert!(loss.abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_is_ln3() {
        let third = 1.0 / 3.0;
        let loss = cross_entropy(&[1.0f64, 0.0, 0.0], &[third, third, third]).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-6);
        assert!((loss - 1.098612).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_clamp_engages() {
        let loss = cross_entropy(&[1.0f64, 0.0, 0.0], &[0.0, 0.5, 0.5]).unwrap();
        assert!((loss - (-(1e-7f64).ln())).abs() < 1e-9);
        assert!((loss - 16.118).abs() < 1e-2);
    }

    #[test]
    fn cross_entropy_rejects_non_one_hot() {
        assert!(matches!(
            cross_entropy(&[0.5f64, 0.5, 0.0], &[0.3, 0.3, 0.4]),
            Err(TrainError::NotOneHot)
        ));
        assert!(matches!(
            cross_entropy(&[1.0f64, 1.0, 0.0], &[0.3, 0.3, 0.4]),
            Err(TrainError::NotOneHot)
        ));
    }

    fn scalar_model() -> (ModelParameters<f64>, Gradients<f64>, OptimizerState<f64>) {
        use crate::model::{LayerGrads, LayerParams};
        let params = ModelParameters {
            layers: vec![Some(LayerParams {
                weights: vec![0.0f64],
                bias: vec![],
                frozen: false,
            })],
        };
        let grads = Gradients {
            layers: vec![Some(LayerGrads {
                d_weights: vec![1.0f64],
                d_bias: vec![],
            })],
        };
        let state = OptimizerState::new(&params);
        (params, grads, state)
    }

    #[test]
    fn adadelta_hand_evaluated_first_step() {
        let (mut params, grads, mut state) = scalar_model();
        let config = TrainingConfig::default();
        adadelta_step(&mut params, &grads, &mut state, &config).unwrap();
        // oracle: direct evaluation of the update rule in f64
        let eg2: f64 = 0.95 * 0.0 + 0.05 * 1.0;
        let delta = -((0.0f64 + 1e-6).sqrt() / (eg2 + 1e-6).sqrt());
        let w = params.layers[0].as_ref().unwrap().weights[0];
        assert!((w - delta).abs() < 1e-12);
        assert!((w - (-0.0044719)).abs() < 1e-6);
        let slot = state.layers[0].as_ref().unwrap();
        assert!((slot.eg2_weights[0] - eg2).abs() < 1e-15);
        assert!((slot.ed2_weights[0] - 0.05 * delta * delta).abs() < 1e-15);
    }

    #[test]
    fn adadelta_zero_gradient_decays_accumulators_only() {
        let (mut params, mut grads, mut state) = scalar_model();
        let config = TrainingConfig::default();
        adadelta_step(&mut params, &grads, &mut state, &config).unwrap();
        let w_before = params.layers[0].as_ref().unwrap().weights[0];
        let eg2_before = state.layers[0].as_ref().unwrap().eg2_weights[0];
        grads.layers[0].as_mut().unwrap().d_weights[0] = 0.0;
        adadelta_step(&mut params, &grads, &mut state, &config).unwrap();
        assert_eq!(params.layers[0].as_ref().unwrap().weights[0], w_before);
        assert!(
            (state.layers[0].as_ref().unwrap().eg2_weights[0] - 0.95 * eg2_before).abs() < 1e-15
        );
    }

    #[test]
    fn adadelta_is_deterministic() {
        let (params0, grads, state0) = scalar_model();
        let config = TrainingConfig::default();
        let mut a = (params0.clone(), state0.clone());
        let mut b = (params0, state0);
        adadelta_step(&mut a.0, &grads, &mut a.1, &config).unwrap();
        adadelta_step(&mut b.0, &grads, &mut b.1, &config).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    fn desk_model() -> (ArchitectureGraph, ModelParameters<f32>) {
        let config = ArchConfig {
            backbone: Backbone::Vgg19,
            variant: ArchVariant::RagnetV2,
            input_shape: (32, 32),
            block_channels: [4, 4, 4, 6, 6],
            embedding_channels: 6,
        };
        build_model(&config, None, 17).unwrap()
    }

    fn desk_data() -> (Dataset, Dataset) {
        let cfg = SynthConfig {
            n_patients_source: 15,
            n_patients_target: 6,
            samples_per_patient: (2, 2),
            image_shape: (32, 32),
            ..SynthConfig::default()
        };
        let (source, _) = generate_synthetic(&cfg).unwrap();
        let plan = make_cv_folds(&source, 5, 1).unwrap();
        materialize(&source, &plan, 0).unwrap()
    }

    #[test]
    fn zero_epochs_returns_input_params() {
        let (graph, params) = desk_model();
        let (train, val) = desk_data();
        let config = TrainingConfig {
            epochs: 0,
            ..TrainingConfig::default()
        };
        let out = train_model(&graph, &params, &train, &val, &config).unwrap();
        assert_eq!(out.final_params, params);
        assert!(out.trace.is_empty());
        assert_eq!(out.best_epoch, None);
    }

    #[test]
    fn separable_set_trains_to_high_accuracy() {
        let (graph, params) = desk_model();
        let (train, val) = desk_data();
        // 24 train samples at this fold split
        let config = TrainingConfig {
            epochs: 50,
            batch_size: 4,
            shuffle_seed: 4,
            ..TrainingConfig::default()
        };
        let out = train_model(&graph, &params, &train, &val, &config).unwrap();
        assert_eq!(out.trace.len(), 50);
        assert!(
            out.trace[49].mean_loss < out.trace[0].mean_loss,
            "loss did not decrease: {} -> {}",
            out.trace[0].mean_loss,
            out.trace[49].mean_loss
        );
        let train_report = evaluate(&graph, &out.final_params, &train).unwrap();
        assert!(
            train_report.top1_from_sn() >= 0.95,
            "train accuracy {}",
            train_report.sn
        );
        // every reported loss stays within the clamp bound
        for r in &out.trace {
            assert!(r.mean_loss >= 0.0 && r.mean_loss <= -(LOSS_CLAMP_FLOOR).ln());
        }
    }

    #[test]
    fn frozen_layers_bitwise_unchanged_by_training() {
        let (graph, params) = desk_model();
        let (train, val) = desk_data();
        let config = TrainingConfig {
            epochs: 3,
            batch_size: 8,
            ..TrainingConfig::default()
        };
        let out = train_model(&graph, &params, &train, &val, &config).unwrap();
        for (i, (before, after)) in params
            .layers
            .iter()
            .zip(&out.final_params.layers)
            .enumerate()
        {
            if let (Some(b), Some(a)) = (before, after) {
                if b.frozen {
                    assert_eq!(b.weights, a.weights, "layer {i} weights changed");
                    assert_eq!(b.bias, a.bias, "layer {i} bias changed");
                } else {
                    assert_ne!(b.weights, a.weights, "layer {i} never updated");
                }
            }
        }
    }

    #[test]
    fn training_is_fully_deterministic() {
        let (graph, params) = desk_model();
        let (train, val) = desk_data();
        let config = TrainingConfig {
            epochs: 2,
            batch_size: 8,
            shuffle_seed: 11,
            ..TrainingConfig::default()
        };
        let a = train_model(&graph, &params, &train, &val, &config).unwrap();
        let b = train_model(&graph, &params, &train, &val, &config).unwrap();
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn eval_only_labels_abort_training() {
        let (graph, params) = desk_model();
        let cfg = SynthConfig {
            n_patients_source: 6,
            n_patients_target: 6,
            samples_per_patient: (1, 1),
            image_shape: (32, 32),
            ..SynthConfig::default()
        };
        let (source, target) = generate_synthetic(&cfg).unwrap();
        let config = TrainingConfig {
            epochs: 1,
            ..TrainingConfig::default()
        };
        let err = train_model(&graph, &params, &target, &source, &config);
        assert!(matches!(
            err,
            Err(TrainError::Dataset(DatasetError::LabelLeakage(_)))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (graph, params) = desk_model();
        let state = OptimizerState::new(&params);
        let meta = CheckpointMeta {
            config: TrainingConfig::default(),
            epochs_completed: 0,
        };
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &graph, &params, Some(&state), &meta).unwrap();
        let bundle = WeightBundle::load(&dir.path().join("weights")).unwrap();
        let reloaded: ModelParameters<f32> =
            crate::model::init_parameters(&graph, Some(&bundle), 12345).unwrap();
        assert_eq!(reloaded, params);
        assert!(dir.path().join("opt_eg2/index.json").exists());
        assert!(dir.path().join("graph.json").exists());
    }

    impl MetricReport {
        /// Micro SN equals top-1 accuracy for single-label data.
        fn top1_from_sn(&self) -> f64 {
            self.sn
        }
    }

    #[test]
    fn trace_jsonl_one_line_per_epoch() {
        let trace = vec![
            EpochRecord {
                epoch: 0,
                mean_loss: 1.0,
                val: MetricReport {
                    sn: 0.5,
                    sp: 0.75,
                    fs: 0.5,
                    acc: 2.0 / 3.0,
                    auc: 0.5,
                    n_samples: 4,
                },
            };
            3
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        write_trace_jsonl(&trace, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn grade_one_hot() {
        assert_eq!(GradeLabel::Early.one_hot::<f64>(), [0.0, 1.0, 0.0]);
    }
}
