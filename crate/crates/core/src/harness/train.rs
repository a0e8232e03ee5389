use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use qica_autograd::{Graph, Mat, Real};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{augment, Manifest, Sample, DEFAULT_KERNEL_SIGMA};
use crate::error::{io_err, QicaError, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::{Precision, TrainConfig};
use crate::harness::eval::evaluate;
use crate::harness::metrics::EpochRecord;
use crate::harness::optim::{AdamW, AdamWConfig};
use crate::loss::LossBreakdown;
use crate::model::{QicaModel, Target};
use crate::params::{Ctx, ParamId};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt.json";
pub const LAST_CHECKPOINT: &str = "last.ckpt.json";

/// Mean of the per-image loss terms of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub density: f64,
    pub enc_qty: f64,
    pub dec_qty: f64,
    pub total: f64,
    /// Mean absolute error of the factual count over the batch.
    pub mean_abs_count_error: f64,
}

#[derive(Serialize)]
struct FailureDump<'a> {
    epoch: usize,
    step: usize,
    scenes: Vec<DumpedScene<'a>>,
    breakdowns: &'a [LossBreakdown],
}

#[derive(Serialize)]
struct DumpedScene<'a> {
    seed: u64,
    category: String,
    count: usize,
    points: &'a [(f64, f64)],
}

pub struct Trainer<T> {
    pub model: QicaModel<T>,
    pub config: TrainConfig,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    steps: usize,
    epoch: usize,
    /// Where a non-finite batch is dumped.
    dump_dir: PathBuf,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = QicaModel::new(config.model_config(), config.seed)?;
        Ok(Self::from_model(model, config))
    }

    pub fn from_model(mut model: QicaModel<T>, config: TrainConfig) -> Self {
        model.params.set_frozen_backbone(config.freeze_backbone);
        let optimizer = AdamW::new(AdamWConfig::new(config.learning_rate, config.weight_decay), &model.params);
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0F_DA7A);
        Self {
            model,
            config,
            optimizer,
            rng,
            steps: 0,
            epoch: 0,
            dump_dir: std::env::temp_dir(),
        }
    }

    pub fn with_dump_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.dump_dir = dir.into();
        self
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn budget_exhausted(&self) -> bool {
        self.config.max_steps > 0 && self.steps >= self.config.max_steps
    }

    /// One optimizer step on `batch`: per-image losses are averaged and all
    /// hypothesis passes of an image share one backward.
    pub fn step(&mut self, batch: &[&Sample]) -> Result<StepReport> {
        assert!(!batch.is_empty());
        let objective = self.config.objective();
        let scale = 1.0 / batch.len() as f64;
        let mut acc: Vec<Option<Mat<T>>> = vec![None; self.model.params.len()];
        let mut breakdowns = Vec::with_capacity(batch.len());
        let mut abs_err = 0.0;
        let density_hw = self.model.density_hw();
        for sample in batch {
            let augmented = self
                .config
                .augment
                .then(|| augment(&sample.image, &sample.points, density_hw, DEFAULT_KERNEL_SIGMA, &mut self.rng));
            let (image, density) = match &augmented {
                Some((img, den, _)) => (img, den),
                None => (&sample.image, &sample.density),
            };
            let g = Graph::new();
            let ctx = Ctx::new(&g, &self.model.params);
            let target = Target {
                image,
                density,
                count: sample.count,
                category: sample.category.name(),
            };
            let fwd = self.model.training_forward(&ctx, &target, &objective)?;
            breakdowns.push(fwd.breakdown);
            if !fwd.breakdown.total.is_finite() {
                let dump = self.dump(batch, &breakdowns)?;
                return Err(QicaError::NonFiniteLoss {
                    epoch: self.epoch,
                    step: self.steps,
                    dump,
                });
            }
            abs_err += (fwd.counts[0] - sample.count as f64).abs();
            let mut grads = g.backward(fwd.loss);
            for (idx, slot) in acc.iter_mut().enumerate() {
                if let Some(gm) = grads.take(idx) {
                    let gm = gm.map(|v| v * T::of(scale));
                    match slot {
                        Some(s) => s.add_assign(&gm),
                        None => *slot = Some(gm),
                    }
                }
            }
        }
        let grads: Vec<(ParamId, Mat<T>)> = acc
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| g.map(|g| (ParamId(i), g)))
            .collect();
        if grads.iter().any(|(_, g)| !g.is_finite()) {
            let dump = self.dump(batch, &breakdowns)?;
            return Err(QicaError::NonFiniteLoss {
                epoch: self.epoch,
                step: self.steps,
                dump,
            });
        }
        self.optimizer.step(&mut self.model.params, &grads);
        self.steps += 1;
        let mean = |f: fn(&LossBreakdown) -> f64| breakdowns.iter().map(f).sum::<f64>() * scale;
        Ok(StepReport {
            density: mean(|b| b.density),
            enc_qty: mean(|b| b.enc_qty),
            dec_qty: mean(|b| b.dec_qty),
            total: mean(|b| b.total),
            mean_abs_count_error: abs_err * scale,
        })
    }

    /// One shuffled pass over `train`, stopping early if the step budget
    /// runs out. Returns the mean step report.
    pub fn epoch(&mut self, train: &[Sample]) -> Result<StepReport> {
        self.epoch += 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = [0.0; 5];
        let mut n = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            if self.budget_exhausted() {
                break;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let r = self.step(&batch)?;
            for (s, v) in sum.iter_mut().zip([r.density, r.enc_qty, r.dec_qty, r.total, r.mean_abs_count_error]) {
                *s += v;
            }
            n += 1;
        }
        let n = n.max(1) as f64;
        Ok(StepReport {
            density: sum[0] / n,
            enc_qty: sum[1] / n,
            dec_qty: sum[2] / n,
            total: sum[3] / n,
            mean_abs_count_error: sum[4] / n,
        })
    }

    fn dump(&self, batch: &[&Sample], breakdowns: &[LossBreakdown]) -> Result<PathBuf> {
        let path = self
            .dump_dir
            .join(format!("nonfinite_epoch{}_step{}.json", self.epoch, self.steps));
        let report = FailureDump {
            epoch: self.epoch,
            step: self.steps,
            scenes: batch
                .iter()
                .map(|s| DumpedScene {
                    seed: s.seed,
                    category: s.category.to_string(),
                    count: s.count,
                    points: &s.points,
                })
                .collect(),
            breakdowns,
        };
        fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(io_err(&path))?;
        Ok(path)
    }
}

pub struct TrainOutcome<T> {
    /// Parameters with the best validation MAE (the last ones without a
    /// validation set).
    pub best: QicaModel<T>,
    pub best_epoch: usize,
    pub last: QicaModel<T>,
    pub history: Vec<EpochRecord>,
    pub steps: usize,
}

/// Full training loop over in-memory samples. With `out`, appends the
/// metric log and writes the best and last checkpoints there.
pub fn train_on<T: Real>(
    config: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    out: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    if train.is_empty() {
        return Err(QicaError::Config("empty training set".into()));
    }
    let mut trainer = Trainer::<T>::new(config.clone())?;
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            trainer = trainer.with_dump_dir(dir);
            let path = dir.join(METRICS_FILE);
            Some((File::create(&path).map_err(io_err(&path))?, path))
        }
        None => None,
    };
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, trainer.model.clone());
    for epoch in 1..=config.epochs {
        if trainer.budget_exhausted() {
            break;
        }
        let r = trainer.epoch(train)?;
        let (val_mae, val_rmse) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let e = evaluate(&trainer.model, val)?;
            (e.mae, e.rmse)
        };
        let record = EpochRecord {
            epoch,
            loss_density: r.density,
            loss_enc: r.enc_qty,
            loss_dec: r.dec_qty,
            loss_total: r.total,
            val_mae,
            val_rmse,
        };
        info!(
            "epoch {epoch} step {} loss {:.4} (density {:.4} enc {:.4} dec {:.4}) val mae {:.3} rmse {:.3}",
            trainer.steps(),
            r.total,
            r.density,
            r.enc_qty,
            r.dec_qty,
            val_mae,
            val_rmse
        );
        if let Some((file, path)) = log.as_mut() {
            writeln!(file, "{}", serde_json::to_string(&record)?).map_err(io_err(&*path))?;
        }
        history.push(record);
        if val.is_empty() || val_mae < best.0 {
            best = (if val.is_empty() { f64::INFINITY } else { val_mae }, epoch, trainer.model.clone());
            if let Some(dir) = out {
                Checkpoint::from_model(&best.2, config, epoch, &history).save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
    }
    if let Some(dir) = out {
        Checkpoint::from_model(&trainer.model, config, history.len(), &history).save(&dir.join(LAST_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        best: best.2,
        best_epoch: best.1,
        steps: trainer.steps(),
        last: trainer.model,
        history,
    })
}

/// Loads the manifests named in `config`, trains at the configured
/// precision and returns the best checkpoint.
pub fn train(config: &TrainConfig, out: &Path) -> Result<Checkpoint> {
    let load = |p: &Option<PathBuf>| -> Result<Vec<Sample>> {
        match p {
            Some(path) => Manifest::load(path)?.load_samples(path),
            None => Ok(Vec::new()),
        }
    };
    let train_set = load(&config.train_manifest)?;
    if train_set.is_empty() {
        return Err(QicaError::Config("train_manifest is missing or empty".into()));
    }
    let val_set = load(&config.val_manifest)?;
    config.save(&out_dir(out)?.join("config.json"))?;
    match config.precision {
        Precision::Single => finish(train_on::<f32>(config, &train_set, &val_set, Some(out))?, config),
        Precision::Double => finish(train_on::<f64>(config, &train_set, &val_set, Some(out))?, config),
    }
}

fn out_dir(out: &Path) -> Result<&Path> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    Ok(out)
}

fn finish<T: Real>(outcome: TrainOutcome<T>, config: &TrainConfig) -> Result<Checkpoint> {
    Ok(Checkpoint::from_model(
        &outcome.best,
        config,
        outcome.best_epoch,
        &outcome.history,
    ))
}
