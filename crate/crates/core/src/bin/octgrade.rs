//! Command-line front end for the OCT glaucoma-grading pipeline.
//!
//! Exit codes: 0 on success, 1 on any domain error, 2 on usage errors
//! (clap's default).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use octgrade::dataset::synth::{generate_synthetic_with_meta, SynthConfig, SynthMeta};
use octgrade::dataset::save_manifest;
use octgrade::interpret::{compute_cam, export_heatmap, heatmap_file_name};
use octgrade::metrics::MetricReport;
use octgrade::model::bundle::WeightBundle;
use octgrade::model::{forward, init_parameters, ArchitectureGraph, Backbone};
use octgrade::orchestrate::{
    compare_report, resolve_data, run_cv, run_experiment, write_result_json, ExperimentConfig,
    ExperimentMode, ExperimentResult,
};
use octgrade::pseudolabel::{predict_pseudo_labels, pseudo_label_quality, write_pseudo_csv};
use octgrade::splits::split_target;
use octgrade::train::{evaluate, save_checkpoint, write_trace_jsonl, CheckpointMeta};
use octgrade::Real;

#[derive(Parser)]
#[command(
    name = "octgrade",
    about = "Self-training pipeline for 3-class glaucoma grading of OCT B-scans",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOverrides {
    /// Override every seed in the loaded configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the backbone (vgg16 | vgg19).
    #[arg(long)]
    backbone: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target dataset pair.
    Synth {
        /// Optional SynthConfig JSON; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (creates source/ and target/ manifests).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stage-1 cross-validated training on the source set.
    Train {
        /// ExperimentConfig JSON.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the best-fold checkpoint and CV report.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: CommonOverrides,
    },
    /// Predict pseudo labels for the target pool with a trained model.
    Pseudolabel {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: CommonOverrides,
    },
    /// Run a full experiment (baseline/proposed/lower_bound/upper_bound/
    /// backbone_compare).
    Selftrain {
        #[arg(long)]
        config: PathBuf,
        /// Override the experiment mode from the config file.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: CommonOverrides,
    },
    /// Evaluate a trained model on the held-out target test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: CommonOverrides,
    },
    /// Export class-activation-map overlays for target test scans.
    Cam {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Scan to explain; all test scans when omitted.
        #[arg(long)]
        image_id: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: CommonOverrides,
    },
    /// Tabulate several experiment results against the baseline.
    Compare {
        /// ExperimentResult JSON files (at least two).
        results: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_hash: Option<String>,
    seeds: Option<octgrade::orchestrate::Seeds>,
    artifacts: Vec<String>,
}

fn write_run_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), Box<dyn std::error::Error>> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("run_manifest.json"),
        serde_json::to_vec_pretty(manifest)?,
    )?;
    Ok(())
}

fn load_experiment_config(
    path: &Path,
    overrides: &CommonOverrides,
) -> Result<ExperimentConfig, Box<dyn std::error::Error>> {
    let mut config: ExperimentConfig = serde_json::from_slice(&std::fs::read(path)?)?;
    if let Some(seed) = overrides.seed {
        config.seeds = octgrade::orchestrate::Seeds {
            split: seed,
            init: seed.wrapping_add(1),
            shuffle: seed.wrapping_add(2),
        };
        if let octgrade::orchestrate::DataSource::Synthetic { config: synth } = &mut config.data {
            synth.seed = seed;
        }
    }
    if let Some(backbone) = &overrides.backbone {
        config.arch.backbone = backbone.parse::<Backbone>()?;
    }
    Ok(config)
}

fn load_checkpoint(
    dir: &Path,
) -> Result<(ArchitectureGraph, octgrade::model::ModelParameters<Real>), Box<dyn std::error::Error>>
{
    let graph: ArchitectureGraph = serde_json::from_slice(&std::fs::read(dir.join("graph.json"))?)?;
    let bundle = WeightBundle::load(&dir.join("weights"))?;
    let params = init_parameters::<Real>(&graph, Some(&bundle), 0)?;
    Ok((graph, params))
}

fn report_text(report: &MetricReport) -> String {
    format!(
        "SN {:.4}  SP {:.4}  FS {:.4}  ACC {:.4}  AUC {:.4}  (n={})\n",
        report.sn, report.sp, report.fs, report.acc, report.auc, report.n_samples
    )
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Synth { config, out, seed } => {
            let mut synth: SynthConfig = match config {
                Some(path) => serde_json::from_slice(&std::fs::read(path)?)?,
                None => SynthConfig::default(),
            };
            if let Some(seed) = seed {
                synth.seed = seed;
            }
            let output = generate_synthetic_with_meta(&synth)?;
            std::fs::create_dir_all(&out)?;
            let src = save_manifest(&output.source, &out.join("source"))?;
            let tgt = save_manifest(&output.target, &out.join("target"))?;
            let meta = SynthMeta {
                config: synth.clone(),
                seed: synth.seed,
                records: output.records,
            };
            std::fs::write(out.join("synth_meta.json"), serde_json::to_vec_pretty(&meta)?)?;
            write_run_manifest(
                &out,
                &RunManifest {
                    command: "synth".into(),
                    config_hash: None,
                    seeds: None,
                    // recorded relative to --out so reruns into different
                    // directories produce identical manifests
                    artifacts: [&src, &tgt]
                        .iter()
                        .map(|p| {
                            p.strip_prefix(&out)
                                .unwrap_or(p)
                                .display()
                                .to_string()
                        })
                        .collect(),
                },
            )?;
            println!(
                "wrote {} source and {} target scans under {}",
                output.source.n_samples(),
                output.target.n_samples(),
                out.display()
            );
        }
        Command::Train {
            config,
            out,
            overrides,
        } => {
            let config = load_experiment_config(&config, &overrides)?;
            let (source, _) = resolve_data(&config)?;
            let cv = run_cv(&config.arch, &source, &config)?;
            std::fs::create_dir_all(&out)?;
            let graph = octgrade::model::build_graph(&config.arch)?;
            save_checkpoint(
                &out.join("best"),
                &graph,
                &cv.best.best_params,
                None,
                &CheckpointMeta {
                    config: config.training.clone(),
                    epochs_completed: config.training.epochs,
                },
            )?;
            write_trace_jsonl(&cv.best.trace, &out.join("trace.jsonl"))?;
            std::fs::write(
                out.join("cv_report.json"),
                serde_json::to_vec_pretty(&cv.fold_reports)?,
            )?;
            write_run_manifest(
                &out,
                &RunManifest {
                    command: "train".into(),
                    config_hash: Some(config.hash()?),
                    seeds: Some(config.seeds),
                    artifacts: vec!["best".into(), "trace.jsonl".into(), "cv_report.json".into()],
                },
            )?;
            println!(
                "best fold {} (validation ACC {:.4}); checkpoint in {}",
                cv.best_fold,
                cv.best.best_val_acc,
                out.join("best").display()
            );
        }
        Command::Pseudolabel {
            config,
            weights,
            out,
            overrides,
        } => {
            let config = load_experiment_config(&config, &overrides)?;
            let (_, target) = resolve_data(&config)?;
            let split = split_target(&target, config.target_pool_fraction, config.seeds.split)?;
            let pool =
                target.subset_by_patients(&split.pseudo_pool_patients.iter().cloned().collect());
            let (graph, params) = load_checkpoint(&weights)?;
            let labels = predict_pseudo_labels(&graph, &params, &pool)?;
            std::fs::create_dir_all(&out)?;
            write_pseudo_csv(&labels, &out.join("pseudo_labels.csv"))?;
            let quality = pseudo_label_quality(&labels, &pool)?;
            std::fs::write(
                out.join("pseudo_quality.json"),
                serde_json::to_vec_pretty(&quality)?,
            )?;
            write_run_manifest(
                &out,
                &RunManifest {
                    command: "pseudolabel".into(),
                    config_hash: Some(config.hash()?),
                    seeds: Some(config.seeds),
                    artifacts: vec!["pseudo_labels.csv".into(), "pseudo_quality.json".into()],
                },
            )?;
            println!(
                "labeled {} pool scans (diagnostic ACC {:.4})",
                labels.len(),
                quality.acc
            );
        }
        Command::Selftrain {
            config,
            mode,
            out,
            overrides,
        } => {
            let mut config = load_experiment_config(&config, &overrides)?;
            if let Some(mode) = mode {
                config.mode = mode.parse::<ExperimentMode>()?;
            }
            let result = run_experiment(&config)?;
            std::fs::create_dir_all(&out)?;
            write_result_json(&result, &out.join("result.json"))?;
            let mut table = format!("mode: {}\n", result.mode);
            if let Some(test) = &result.test {
                table.push_str("target test:   ");
                table.push_str(&report_text(test));
            }
            if let Some(q) = &result.pseudo_quality {
                table.push_str("pseudo labels: ");
                table.push_str(&report_text(q));
            }
            if let Some(bc) = &result.backbone_compare {
                for (name, agg) in bc {
                    table.push_str(&format!(
                        "{name:<18} ACC {:.4} +/- {:.4}  AUC {:.4} +/- {:.4}\n",
                        agg.acc.0, agg.acc.1, agg.auc.0, agg.auc.1
                    ));
                }
            }
            std::fs::write(out.join("result.txt"), &table)?;
            write_run_manifest(
                &out,
                &RunManifest {
                    command: "selftrain".into(),
                    config_hash: Some(result.config_hash.clone()),
                    seeds: Some(result.seeds),
                    artifacts: vec!["result.json".into(), "result.txt".into()],
                },
            )?;
            print!("{table}");
        }
        Command::Eval {
            config,
            weights,
            out,
            overrides,
        } => {
            let config = load_experiment_config(&config, &overrides)?;
            let (_, target) = resolve_data(&config)?;
            let split = split_target(&target, config.target_pool_fraction, config.seeds.split)?;
            let test = target.subset_by_patients(&split.test_patients.iter().cloned().collect());
            let (graph, params) = load_checkpoint(&weights)?;
            let report = evaluate(&graph, &params, &test)?;
            print!("{}", report_text(&report));
            if let Some(out) = out {
                if let Some(parent) = out.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                std::fs::write(&out, serde_json::to_vec_pretty(&report)?)?;
            }
        }
        Command::Cam {
            config,
            weights,
            image_id,
            out,
            overrides,
        } => {
            let config = load_experiment_config(&config, &overrides)?;
            let (_, target) = resolve_data(&config)?;
            let split = split_target(&target, config.target_pool_fraction, config.seeds.split)?;
            let test = target.subset_by_patients(&split.test_patients.iter().cloned().collect());
            let (graph, params) = load_checkpoint(&weights)?;
            let scans: Vec<_> = test
                .samples
                .iter()
                .map(|s| s.scan.clone())
                .filter(|s| image_id.as_ref().map_or(true, |id| &s.image_id == id))
                .collect();
            if scans.is_empty() {
                return Err(format!(
                    "no test scan matches image id {:?}",
                    image_id.as_deref().unwrap_or("<all>")
                )
                .into());
            }
            let traces = forward(&params, &graph, &scans)?;
            std::fs::create_dir_all(&out)?;
            let mut artifacts = Vec::new();
            for (scan, trace) in scans.iter().zip(&traces) {
                for class in octgrade::dataset::GradeLabel::ALL {
                    let cam = compute_cam(&graph, &params, trace, class, &scan.image_id)?;
                    let name = heatmap_file_name(&cam);
                    export_heatmap(&cam, scan, &out.join(&name))?;
                    artifacts.push(name);
                }
            }
            write_run_manifest(
                &out,
                &RunManifest {
                    command: "cam".into(),
                    config_hash: Some(config.hash()?),
                    seeds: Some(config.seeds),
                    artifacts,
                },
            )?;
            println!("wrote {} overlays to {}", scans.len() * 3, out.display());
        }
        Command::Compare { results, out } => {
            let loaded: Vec<ExperimentResult> = results
                .iter()
                .map(|p| -> Result<ExperimentResult, Box<dyn std::error::Error>> {
                    Ok(serde_json::from_slice(&std::fs::read(p)?)?)
                })
                .collect::<Result<_, _>>()?;
            let table = compare_report(&loaded)?;
            let text = table.to_string();
            print!("{text}");
            if let Some(out) = out {
                if let Some(parent) = out.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                std::fs::write(&out, text)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
