//! `segcal` command line: dataset generation, training, evaluation,
//! post-hoc calibration, full comparison suites, and report rendering.
//!
//! Every subcommand exits 0 on success; on failure it prints one
//! machine-readable JSON error line to stderr and exits 1.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use segcal::error::{Error, Result};
use segcal::model::{load_checkpoint, save_checkpoint, AdamScalars};
use segcal::report::{load_results, render_reports};
use segcal::runner::{
    evaluate, fit_calibrators, run_suite_with_models, train, BayesPredictor, Calibrated,
    ExperimentConfig, LambdaPreset, ModelPredictor, Predictor, SuiteConfig,
};
use segcal::synthdata::{generate, load_dataset, save_dataset, DatasetSplits, TaskConfig};

#[derive(Parser)]
#[command(
    name = "segcal",
    about = "Calibration-aware segmentation experiments on a synthetic task with a known Bayes posterior"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and persist it as SGT1 tensors plus a manifest.
    Gen {
        /// Task config JSON; defaults apply for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per configured seed and write checkpoints.
    Train {
        /// Experiment config JSON (task + objective + protocol).
        #[arg(long)]
        config: PathBuf,
        /// Train only this seed instead of the config's list.
        #[arg(long)]
        seed: Option<u64>,
        /// Load the dataset from `gen` output instead of regenerating.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint (or the stored Bayes posterior) on a split.
    Eval {
        /// Checkpoint directory; omit to evaluate the Bayes posterior.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 10)]
        ece_bins: usize,
        /// Apply a calibrator JSON written by `calibrate`.
        #[arg(long)]
        calibrator: Option<PathBuf>,
        /// Write the evaluation JSON here instead of stdout only.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit Platt and isotonic calibrators on the validation split and
    /// store them next to the checkpoint.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and evaluate the whole comparison grid, then render reports.
    Suite {
        /// Suite config JSON; omit for the default grid.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Weight preset for the default grid: "synth" (tuned for this
        /// task), "wmh", or "la".
        #[arg(long, default_value = "synth")]
        preset: String,
        /// Dataset seed for the default grid.
        #[arg(long, default_value_t = segcal::runner::DEFAULT_SUITE_SEED)]
        seed: u64,
        /// Run the lambda sweep grid instead of a single suite.
        #[arg(long)]
        sweep: bool,
        /// Skip writing per-seed checkpoints.
        #[arg(long)]
        no_checkpoints: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render reports from a previously written results.json.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_json_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn split_of<'a>(data: &'a DatasetSplits, name: &str) -> Result<&'a [segcal::synthdata::SynthSample]> {
    match name {
        "train" => Ok(&data.train),
        "val" => Ok(&data.val),
        "test" => Ok(&data.test),
        other => Err(Error::Config(format!(
            "unknown split {other:?}, expected train/val/test"
        ))),
    }
}

fn cmd_gen(config: Option<PathBuf>, seed: Option<u64>, out: PathBuf) -> Result<()> {
    let mut task: TaskConfig = match config {
        Some(path) => serde_json::from_slice(&read_json_file(&path)?)
            .map_err(|e| Error::json("task config", e))?,
        None => TaskConfig::default(),
    };
    if let Some(seed) = seed {
        task.seed = seed;
    }
    task.validate()?;
    let data = generate(&task)?;
    save_dataset(&data, &out)?;
    println!(
        "wrote {} train / {} val / {} test samples to {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(
    config: PathBuf,
    seed: Option<u64>,
    data: Option<PathBuf>,
    out: PathBuf,
) -> Result<()> {
    let config = ExperimentConfig::from_json_bytes(&read_json_file(&config)?)?;
    let dataset = match data {
        Some(dir) => load_dataset(dir)?,
        None => generate(&config.task)?,
    };
    let seeds: Vec<u64> = match seed {
        Some(s) => vec![s],
        None => config.seeds.clone(),
    };
    let label = config.objective.label();
    for seed in seeds {
        let (params, history) = train(&config.objective, &config.protocol, &dataset, seed)?;
        let dir = out.join(format!("{label}_seed{seed}"));
        let adam = AdamScalars {
            step: (config.protocol.epochs
                * dataset.train.len().div_ceil(config.protocol.batch_size)) as u64,
            epoch: config.protocol.epochs,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            base_lr: config.protocol.optimizer.base_lr,
            decay_factor: config.protocol.optimizer.decay_factor,
            decay_interval: config.protocol.optimizer.decay_interval,
        };
        save_checkpoint(&params, &adam, &dir)?;
        let history_json = serde_json::to_string_pretty(&history)
            .map_err(|e| Error::json("training history", e))?;
        let hist_path = dir.join("history.json");
        std::fs::write(&hist_path, history_json)
            .map_err(|e| Error::io(hist_path.display().to_string(), e))?;
        let last = history.last().expect("at least one epoch");
        println!(
            "{label} seed {seed}: final train loss {:.6}, val dice {:.4} -> {}",
            last.train_loss,
            last.val_dice,
            dir.display()
        );
    }
    Ok(())
}

fn cmd_eval(
    checkpoint: Option<PathBuf>,
    data: PathBuf,
    split: String,
    ece_bins: usize,
    calibrator: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let dataset = load_dataset(&data)?;
    let samples = split_of(&dataset, &split)?;
    let outcome = match &checkpoint {
        None => evaluate(&BayesPredictor, samples, ece_bins)?,
        Some(dir) => {
            let (params, _) = load_checkpoint(dir)?;
            let inner = ModelPredictor(&params);
            match &calibrator {
                None => evaluate(&inner, samples, ece_bins)?,
                Some(path) => {
                    let bytes = read_json_file(path)?;
                    let fitted: segcal::runner::FittedCalibrators =
                        serde_json::from_slice(&bytes)
                            .map_err(|e| Error::json("calibrator file", e))?;
                    fitted.isotonic.validate()?;
                    // file name selects the method: *platt*.json vs *isotonic*.json
                    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
                    let predictor: Box<dyn Predictor> = if name.contains("platt") {
                        Box::new(Calibrated::Platt(&inner, fitted.platt))
                    } else {
                        Box::new(Calibrated::Isotonic(&inner, fitted.isotonic))
                    };
                    evaluate(predictor.as_ref(), samples, ece_bins)?
                }
            }
        }
    };
    let json =
        serde_json::to_string_pretty(&outcome).map_err(|e| Error::json("evaluation", e))?;
    println!("{json}");
    if let Some(path) = out {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
        std::fs::write(&path, &json).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

fn cmd_calibrate(checkpoint: PathBuf, data: PathBuf, seed: Option<u64>) -> Result<()> {
    let dataset = load_dataset(&data)?;
    let (params, _) = load_checkpoint(&checkpoint)?;
    segcal::runner::assert_split_disjoint(&dataset.val, &dataset.test)?;
    let fitted = fit_calibrators(&params, &dataset.val, seed.unwrap_or(0))?;
    let json =
        serde_json::to_string_pretty(&fitted).map_err(|e| Error::json("calibrators", e))?;
    let path = checkpoint.join("calibrators.json");
    std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
    println!(
        "fitted platt (a={:.4}, b={:.4}, converged={}) and isotonic ({} thresholds) -> {}",
        fitted.platt.a,
        fitted.platt.b,
        fitted.platt_converged,
        fitted.isotonic.thresholds.len(),
        path.display()
    );
    Ok(())
}

fn run_one_suite(config: &SuiteConfig, out: &Path, checkpoints: bool) -> Result<()> {
    let (outcome, models) = run_suite_with_models(config)?;
    let written = render_reports(&outcome, out)?;
    if checkpoints {
        for (label, seeds) in &models {
            for (seed, params) in seeds {
                let dir = out.join("checkpoints").join(format!("{label}_seed{seed}"));
                let adam = AdamScalars {
                    step: 0,
                    epoch: config.protocol.epochs,
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                    base_lr: config.protocol.optimizer.base_lr,
                    decay_factor: config.protocol.optimizer.decay_factor,
                    decay_interval: config.protocol.optimizer.decay_interval,
                };
                save_checkpoint(params, &adam, &dir)?;
            }
        }
    }
    for record in &outcome.records {
        let cells = match &record.aggregate {
            Some(agg) => format!(
                "dice {:.4}, hd {:.2}, brier {:.5}, brier+ {:.5}, ece {:.5}",
                agg.mean.dice, agg.mean.hd, agg.mean.brier, agg.mean.brier_plus, agg.mean.ece
            ),
            None => "all seeds failed".to_string(),
        };
        println!("{:<16} {cells}", record.label);
    }
    println!("wrote {} files to {}", written.len(), out.display());
    Ok(())
}

fn cmd_suite(
    config: Option<PathBuf>,
    preset: String,
    seed: u64,
    sweep: bool,
    no_checkpoints: bool,
    out: PathBuf,
) -> Result<()> {
    let base = match config {
        Some(path) => SuiteConfig::from_json_bytes(&read_json_file(&path)?)?,
        None => SuiteConfig::default_suite(seed, LambdaPreset::parse(&preset)?),
    };
    if sweep {
        for cfg in base.sweep(&[0.1, 0.3, 0.5, 1.0]) {
            let lambda = cfg
                .objectives
                .iter()
                .find(|o| {
                    matches!(
                        o.regularizer,
                        segcal::losses::Regularizer::MeepH | segcal::losses::Regularizer::MeepKl
                    )
                })
                .map(|o| o.lambda)
                .unwrap_or(0.0);
            let dir = out.join(format!("lambda_{lambda}"));
            println!("== lambda {lambda}");
            run_one_suite(&cfg, &dir, !no_checkpoints)?;
        }
        Ok(())
    } else {
        run_one_suite(&base, &out, !no_checkpoints)
    }
}

fn cmd_report(records: PathBuf, out: PathBuf) -> Result<()> {
    let outcome = load_results(&records)?;
    let written = render_reports(&outcome, &out)?;
    println!("wrote {} files to {}", written.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, seed, out } => cmd_gen(config, seed, out),
        Command::Train {
            config,
            seed,
            data,
            out,
        } => cmd_train(config, seed, data, out),
        Command::Eval {
            checkpoint,
            data,
            split,
            ece_bins,
            calibrator,
            out,
        } => cmd_eval(checkpoint, data, split, ece_bins, calibrator, out),
        Command::Calibrate {
            checkpoint,
            data,
            seed,
        } => cmd_calibrate(checkpoint, data, seed),
        Command::Suite {
            config,
            preset,
            seed,
            sweep,
            no_checkpoints,
            out,
        } => cmd_suite(config, preset, seed, sweep, no_checkpoints, out),
        Command::Report { records, out } => cmd_report(records, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({
                "error": e.kind(),
                "message": e.to_string(),
            });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
