use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use qica_core::data::{Category, GenPlan, SplitPlan, DEFAULT_KERNEL_SIGMA};
use qica_core::harness::{self, Checkpoint, GradcheckOptions, TrainConfig};
use qica_core::ModelConfig;

#[derive(Parser)]
#[command(name = "qica", version, about = "Quantity-aware zero-shot counting on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes with images, QDM densities and manifests.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "train,val,test")]
        splits: Vec<String>,
        /// Categories cycled through within every split.
        #[arg(long, value_delimiter = ',', default_value = "circles")]
        category: Vec<Category>,
        #[arg(long, default_value_t = 5)]
        min_count: usize,
        #[arg(long, default_value_t = 40)]
        max_count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scenes per split.
        #[arg(long, default_value_t = 64)]
        scenes: usize,
        /// Model config whose image and density sizes the data must match.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train from a JSON config; writes metrics.jsonl and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report MAE and RMSE of a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Predict a density map for one image and a category-only text.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every trainable parameter group.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Also count coordinates whose perturbation crosses a kink.
        #[arg(long)]
        no_kink_guard: bool,
        #[arg(long, default_value_t = 32)]
        coords: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData {
            out,
            splits,
            category,
            min_count,
            max_count,
            seed,
            scenes,
            config,
        } => {
            if min_count > max_count {
                bail!("--min-count {min_count} exceeds --max-count {max_count}");
            }
            if category.is_empty() || splits.is_empty() {
                bail!("need at least one split and one category");
            }
            let model = match config {
                Some(path) => TrainConfig::load(&path)?.model_config(),
                None => ModelConfig::default(),
            };
            let plan = GenPlan {
                splits: splits
                    .iter()
                    .map(|name| SplitPlan {
                        name: name.clone(),
                        categories: category.clone(),
                        scenes,
                    })
                    .collect(),
                min_count,
                max_count,
                seed,
                image_hw: (model.vision.image_height, model.vision.image_width),
                density_hw: model.density_hw(),
                radius: (2.0, 3.0),
                kernel_sigma: DEFAULT_KERNEL_SIGMA,
            };
            for manifest in plan.write(&out).context("writing dataset")? {
                println!("{}", manifest.display());
            }
        }
        Command::Train { config, out } => {
            let cfg = TrainConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let ckpt = harness::train(&cfg, &out)?;
            match ckpt.history.iter().find(|r| r.epoch == ckpt.epoch) {
                Some(r) => println!(
                    "best epoch {} val_mae {:.4} val_rmse {:.4}",
                    r.epoch, r.val_mae, r.val_rmse
                ),
                None => println!("trained {} epochs", ckpt.history.len()),
            }
            println!("{}", out.join(harness::train::BEST_CHECKPOINT).display());
        }
        Command::Eval { ckpt, manifest } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let e = harness::evaluate_checkpoint(&ckpt, &manifest)?;
            println!("mae {:.4} rmse {:.4} ({} images)", e.mae, e.rmse, e.truth.len());
        }
        Command::Predict { ckpt, image, text, out } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let p = harness::predict_to_dir(&ckpt, &image, &text, &out)?;
            println!("count {:.2} -> {}", p.count, p.density_path.display());
        }
        Command::Gradcheck {
            config,
            no_kink_guard,
            coords,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let options = GradcheckOptions {
                coords_per_group: coords,
                kink_guard: !no_kink_guard,
                seed: cfg.seed,
                ..GradcheckOptions::default()
            };
            let report = harness::gradcheck(&cfg, options)?;
            for g in &report.groups {
                println!(
                    "{:<20} checked {:>3} flagged {:>3} max_rel_err {:.3e} {}",
                    format!("{:?}", g.group),
                    g.checked,
                    g.flagged,
                    g.max_rel_error,
                    if g.passed { "ok" } else { "FAIL" }
                );
            }
            println!("loss {:.6e}, {:.1}s", report.loss, report.seconds);
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
