use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use belmil::data::{make_splits, synth_generate, Dataset, SplitAssignment, SynthConfig};
use belmil::metrics::evaluate;
use belmil::preprocess::{preprocess_image, RasterImage, DEFAULT_COVERAGE, DEFAULT_PATCH_SIZE};
use belmil::report::{emit_report, read_predictions, write_predictions};
use belmil::train::{cross_validate, predict, TrainConfig};
use belmil::{Checkpoint, Error, Result};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::json;

#[derive(Parser)]
#[command(name = "belmil", version, about = "Bag-embedding-loss MIL: tiling, synthetic data, training, evaluation")]
struct Cli {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config: a synthetic-data config for `synth-gen`, a training config for `train`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Otsu tissue mask and patch grid for one PNG image.
    Preprocess {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PATCH_SIZE)]
        patch_size: usize,
        #[arg(long, default_value_t = DEFAULT_COVERAGE)]
        coverage: f64,
    },
    /// Write a synthetic dataset (bags + manifest.json) to a directory.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Patient-grouped, label-stratified test split and cross-validation folds.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0.2)]
        test_ratio: f64,
    },
    /// Cross-validated training; per-fold checkpoints and reports.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Existing split file; generated from `--folds` when absent.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0.2)]
        test_ratio: f64,
        /// Cross-entropy only (ablation).
        #[arg(long)]
        no_bel: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Predictions and metrics of a checkpoint on a split's test bags.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics JSON, PR-curve CSVs and attention CSV from a predictions file.
    Report {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 3 } else { 2 })
        }
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let config_path = cli.config.as_deref();
    match cli.command {
        Command::Preprocess {
            image,
            out,
            patch_size,
            coverage,
        } => {
            let raster = RasterImage::read_png(&image)?;
            let grid = preprocess_image(&raster, patch_size, coverage)?;
            grid.write(&out)?;
            println!("{} patches kept", grid.kept.len());
        }
        Command::SynthGen { out } => {
            let config: SynthConfig = read_config(config_path)?;
            let synth = synth_generate(&config, seed)?;
            let manifest = synth.dataset.save(&out)?;
            println!("{} bags written, manifest {}", synth.dataset.bags.len(), manifest.display());
        }
        Command::Split {
            manifest,
            out,
            folds,
            test_ratio,
        } => {
            let manifest = belmil::data::DatasetManifest::read(&manifest)?;
            let split = make_splits(&manifest, test_ratio, folds, seed)?;
            split.write(&out)?;
            println!("{} test bags, {} folds", split.test_ids.len(), split.folds.len());
        }
        Command::Train {
            manifest,
            out,
            split,
            folds,
            test_ratio,
            no_bel,
            epochs,
        } => {
            let dataset = Dataset::load(&manifest)?;
            let mut config: TrainConfig = read_config(config_path)?;
            config.encoder.input_width = dataset.manifest.feature_width;
            config.encoder.class_count = dataset.manifest.class_count;
            if let Some(seed) = cli.seed {
                config.seed = seed;
            }
            if let Some(epochs) = epochs {
                config.epochs = epochs;
            }
            if no_bel {
                config.use_bel = false;
            }
            config.validate()?;
            let split = match split {
                Some(path) => SplitAssignment::read(path)?,
                None => make_splits(&dataset.manifest, test_ratio, folds, config.seed)?,
            };

            create_dir(&out)?;
            split.write(out.join("split.json"))?;
            let run = cross_validate(&dataset, &split, &config)?;
            let mut fold_summaries = Vec::new();
            for fold in &run.folds {
                let dir = out.join(format!("fold_{}", fold.fold));
                create_dir(&dir)?;
                let checkpoint = dir.join("best.milt");
                fold.result.best.save(&checkpoint)?;
                let mut report = fold.result.report.clone();
                report.checkpoint = Some(checkpoint.display().to_string());
                write_json(&dir.join("train_report.json"), &report)?;
                write_predictions(&fold.test_predictions, dir.join("test_predictions.json"))?;
                write_json(&dir.join("test_metrics.json"), &fold.test_metrics)?;
                fold_summaries.push(json!({
                    "fold": fold.fold,
                    "best_epoch": report.best_epoch,
                    "best_validation_accuracy": report.best_validation_accuracy,
                    "test_accuracy": fold.test_metrics.accuracy,
                }));
            }
            write_json(
                &out.join("run.json"),
                &json!({
                    "config": config,
                    "manifest": manifest.display().to_string(),
                    "split": { "fold_count": split.fold_count, "test_ratio": split.test_ratio, "seed": split.seed },
                    "folds": fold_summaries,
                    "summary": run.summary,
                }),
            )?;
            println!(
                "test accuracy {:.4} ± {:.4} over {} folds",
                run.summary.accuracy.mean, run.summary.accuracy.std, run.summary.folds
            );
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
            out,
        } => {
            let checkpoint = Checkpoint::load(&checkpoint)?;
            let dataset = Dataset::load(&manifest)?;
            let split = SplitAssignment::read(&split)?;
            let bags = dataset.select(&split.test_ids)?;
            let preds = predict(&checkpoint.params, &checkpoint.config, &bags)?;
            let report = evaluate(&preds)?;
            create_dir(&out)?;
            write_predictions(&preds, out.join("predictions.json"))?;
            write_json(&out.join("metrics.json"), &report)?;
            println!("accuracy {:.4}, macro F1 {:.4}", report.accuracy, report.macro_f1);
        }
        Command::Report { predictions, out } => {
            let preds = read_predictions(&predictions)?;
            let report = evaluate(&preds)?;
            let files = emit_report(&report, &preds, &out)?;
            println!(
                "wrote {} and {} PR curve(s)",
                files.metrics.display(),
                files.pr_curves.len()
            );
        }
    }
    Ok(())
}
