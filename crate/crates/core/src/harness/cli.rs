//! `mmvit` command line.
//!
//! Every subcommand starts from the built-in defaults, applies an optional
//! `--config` file of `key = value` lines and then each `--set key=value`
//! in order. Exit status: 0 success, 2 configuration error (including bad
//! flags), 3 data error, 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::{
    ablate_modalities, ablate_modalities_retrain, ablate_order, ablation_csv, evaluate_report,
    metrics_csv, order_csv, rollout, train, write_pgm, RunConfig,
};
use crate::datagen::{generate, load_dataset, read_clip, write_dataset, MANIFEST_NAME};
use crate::error::{Error, Result};
use crate::model::{count_flops, load_checkpoint, save_checkpoint, McaKind, ModelConfig, Variant};
use crate::tokenize::{CompressedClip, Modality, ModalityMask};

#[derive(Debug, Parser)]
#[command(name = "mmvit", version, about = "Multi-modal video transformer on compressed-domain clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic train/val dataset.
    Datagen {
        #[command(flatten)]
        common: Common,
        /// Output directory; receives `train/` and `val/`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint and metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory produced by `datagen`.
        #[arg(long)]
        data: PathBuf,
        /// Run directory; receives `model.ckpt` and `metrics.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split to score.
        #[arg(long, default_value = "val")]
        split: String,
        /// Modalities to drop, e.g. `M,A`.
        #[arg(long, default_value = "")]
        drop: String,
    },
    /// Accuracy with each modality dropped (CSV).
    AblateModality {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Trained model for inference-time drops.
        #[arg(long, required_unless_present = "retrain")]
        checkpoint: Option<PathBuf>,
        /// Retrain from scratch for every modality combination.
        #[arg(long)]
        retrain: bool,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score all six attention orders (CSV).
    AblateOrder {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FLOP and parameter accounting for every variant (CSV).
    Flops {
        #[command(flatten)]
        common: Common,
        /// Use ViT-B/16 dimensions on eight 224x224 frames.
        #[arg(long)]
        vit_base: bool,
        /// Emit the per-stage breakdown instead of one row per model.
        #[arg(long)]
        detail: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attention rollout heatmaps for one clip (PGM per modality + CSV).
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &common.sets {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(data: &Path, split: &str) -> Result<Vec<CompressedClip>> {
    let manifest = data.join(split).join(MANIFEST_NAME);
    if !manifest.exists() {
        return Err(Error::Data(format!("{} not found", manifest.display())));
    }
    load_dataset(&manifest)
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

/// The standard line-up: every variant, all three cross-modal mechanisms
/// for variant III.
fn flops_lineup(base: &ModelConfig, vit_base: bool) -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for (variant, mca) in [
        (Variant::I, McaKind::Merged),
        (Variant::II, McaKind::Merged),
        (Variant::III, McaKind::Merged),
        (Variant::III, McaKind::Co),
        (Variant::III, McaKind::ShiftMerge),
        (Variant::IV, McaKind::Merged),
        (Variant::IV, McaKind::ShiftMerge),
    ] {
        out.push(if vit_base {
            ModelConfig::vit_base(variant, mca)
        } else {
            ModelConfig {
                variant,
                mca,
                ..base.clone()
            }
        });
    }
    out
}

pub const FLOPS_HEADER: &str = "model,keys_per_query,complexity,params,macs,tflops";

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Datagen { common, out } => {
            let cfg = run_config(&common)?;
            let train = generate(&cfg.data)?;
            write_dataset(&out.join("train"), &train)?;
            let val = generate(&cfg.val_spec())?;
            write_dataset(&out.join("val"), &val)?;
            println!("wrote {} train and {} val clips to {}", train.len(), val.len(), out.display());
        }
        Command::Train { common, data, out } => {
            let cfg = run_config(&common)?;
            let train_set = load_split(&data, "train")?;
            let val_set = load_split(&data, "val")?;
            let outcome = train(&cfg.model, &cfg.train, &train_set, &val_set)?;
            fs::create_dir_all(&out)?;
            save_checkpoint(&out.join("model.ckpt"), &outcome.model)?;
            fs::write(out.join("metrics.csv"), metrics_csv(&outcome.metrics))?;
            if let Some(last) = outcome.metrics.last() {
                println!(
                    "epoch {}: train_acc {} val_acc {}",
                    last.epoch,
                    last.train_acc,
                    last.val_acc.map_or_else(|| "-".into(), |v| v.to_string())
                );
            }
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            drop,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let clips = load_split(&data, &split)?;
            let mask = ModalityMask::from_drop_list(&drop)?;
            let report = evaluate_report(&model, &clips, mask)?;
            println!("accuracy {} loss {} ({} clips, modalities {})", report.accuracy, report.loss, clips.len(), mask.label());
        }
        Command::AblateModality {
            common,
            data,
            checkpoint,
            retrain,
            out,
        } => {
            let val_set = load_split(&data, "val")?;
            let rows = if retrain {
                let cfg = run_config(&common)?;
                let train_set = load_split(&data, "train")?;
                ablate_modalities_retrain(&cfg.model, &cfg.train, &train_set, &val_set)?
            } else {
                let path = checkpoint.ok_or_else(|| Error::config("--checkpoint is required"))?;
                ablate_modalities(&load_checkpoint(&path)?, &val_set)?
            };
            emit(&ablation_csv(&rows), out.as_deref())?;
        }
        Command::AblateOrder { common, data, out } => {
            let cfg = run_config(&common)?;
            let train_set = load_split(&data, "train")?;
            let val_set = load_split(&data, "val")?;
            let rows = ablate_order(&cfg.model, &cfg.train, &train_set, &val_set)?;
            emit(&order_csv(&rows), out.as_deref())?;
        }
        Command::Flops {
            common,
            vit_base,
            detail,
            out,
        } => {
            let cfg = run_config(&common)?;
            let mut text = String::new();
            for (i, model) in flops_lineup(&cfg.model, vit_base).iter().enumerate() {
                let r = count_flops(model)?;
                if detail {
                    let csv = r.to_csv();
                    let body = if i == 0 { &csv[..] } else { csv.split_once('\n').map_or("", |x| x.1) };
                    text.push_str(body);
                } else {
                    if i == 0 {
                        text.push_str(FLOPS_HEADER);
                        text.push('\n');
                    }
                    text.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        r.label,
                        r.keys_per_patch,
                        r.complexity,
                        r.params,
                        r.total_macs(),
                        r.total_flops() as f64 / 1e12
                    ));
                }
            }
            emit(&text, out.as_deref())?;
        }
        Command::Rollout {
            checkpoint,
            clip,
            out,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let clip = read_clip(&clip)?;
            let map = rollout(&model, &clip)?;
            fs::create_dir_all(&out)?;
            for (m, heat) in Modality::ALL.iter().zip(&map.heatmaps) {
                write_pgm(heat, map.grid, &out.join(format!("rollout_{}.pgm", m.symbol())))?;
            }
            fs::write(out.join("rollout.csv"), map.to_csv())?;
            println!("cls mass {} written to {}", map.cls_mass, out.display());
        }
    }
    Ok(())
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Dimension(_) => 2,
        Error::Data(_) | Error::Format { .. } | Error::Io(_) => 3,
        Error::Contract(_) | Error::State(_) => 1,
    }
}

/// Parses `argv` (program name first) and runs it; returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
