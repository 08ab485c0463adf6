//! Initialization, optimizers and the mini-batch training loop.

mod init;
mod optim;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use init::{init_params, kaiming_bound, KAIMING_SLOPE};
pub use optim::{clip_grad_norm, OptimState, OptimizerKind, Trainable};

use crate::error::{Error, Result};
use crate::loss::{argmax, nrmse};
use crate::model::{batch_loss, DropoutMask, GradMode, Mode, Model, ModelGrads, ReadoutSite, Targets};
use crate::tasks::{SequenceDataset, Split, TargetSet};

/// Training-loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Epoch (1-based) at whose start the learning rate is divided once.
    pub lr_drop_epoch: Option<usize>,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of the training data held out when no validation split exists.
    pub valid_fraction: f64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm ceiling; off unless set.
    pub clip: Option<f64>,
    pub grad_mode: GradMode,
    pub trainable: Trainable,
    /// Sequences per parallel work unit inside a batch.
    pub shard_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-3,
            lr_drop_epoch: None,
            lr_drop_factor: 10.0,
            batch_size: 32,
            seed: 0,
            valid_fraction: 0.1,
            optimizer: OptimizerKind::Adam,
            clip: None,
            grad_mode: GradMode::Stored,
            trainable: Trainable::All,
            shard_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {}",
                self.lr
            )));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return Err(Error::Config(format!(
                "learning-rate drop factor must be positive, got {}",
                self.lr_drop_factor
            )));
        }
        if self.batch_size == 0 || self.shard_size == 0 {
            return Err(Error::Config("batch and shard sizes must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return Err(Error::Config(format!(
                "validation fraction must lie in [0, 1), got {}",
                self.valid_fraction
            )));
        }
        if let Some(c) = self.clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// One entry of the metric history.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: Split,
    pub metric: String,
    pub value: f64,
    /// Seconds since the start of training.
    pub wall_time: f64,
}

/// Aggregate metrics of a model on one dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Mean per-sequence loss.
    pub loss: f64,
    /// Regression only; `None` when the targets are identically zero.
    pub nrmse: Option<f64>,
    /// Classification only.
    pub accuracy: Option<f64>,
}

impl Evaluation {
    /// The model-selection score and whether larger is better.
    pub fn score(&self) -> (f64, bool) {
        match (self.accuracy, self.nrmse) {
            (Some(a), _) => (a, true),
            (None, Some(e)) => (e, false),
            (None, None) => (self.loss, false),
        }
    }

    fn rows(&self, epoch: usize, split: Split, wall_time: f64) -> Vec<MetricRow> {
        let mut out = vec![("loss", self.loss)];
        if let Some(v) = self.nrmse {
            out.push(("nrmse", v));
        }
        if let Some(v) = self.accuracy {
            out.push(("accuracy", v));
        }
        out.into_iter()
            .map(|(metric, value)| MetricRow {
                epoch,
                split,
                metric: metric.to_string(),
                value,
                wall_time,
            })
            .collect()
    }
}

/// Indices grouped into runs of equal sequence length, each at most
/// `size` long, preserving the given order within a length.
fn shards(ds: &SequenceDataset, idx: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut lengths: Vec<usize> = idx.iter().map(|&i| ds.steps(i)).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let mut out = Vec::new();
    for len in lengths {
        let group: Vec<usize> = idx.iter().copied().filter(|&i| ds.steps(i) == len).collect();
        out.extend(group.chunks(size).map(<[usize]>::to_vec));
    }
    out
}

fn check_model_data(model: &Model, ds: &SequenceDataset) -> Result<()> {
    ds.validate()?;
    let cfg = &model.config;
    if ds.input_dim() != cfg.input_dim {
        return Err(Error::Config(format!(
            "data has {} input columns but the model expects {}",
            ds.input_dim(),
            cfg.input_dim
        )));
    }
    if ds.out_dim() != cfg.out_dim {
        return Err(Error::Config(format!(
            "data needs {} outputs but the model produces {}",
            ds.out_dim(),
            cfg.out_dim
        )));
    }
    let want = if ds.is_classification() {
        ReadoutSite::Final
    } else {
        ReadoutSite::PerStep
    };
    if cfg.site != want {
        return Err(Error::Config(
            "classification needs a final-step readout and regression a per-step readout".into(),
        ));
    }
    Ok(())
}

/// Summed loss, flattened predictions and targets, and correct-label count
/// of one shard.
type ShardEval = (f64, Vec<f64>, Vec<f64>, usize);

/// Evaluation-mode metrics over a whole dataset. Work is split into shards
/// of `shard_size` sequences that may run in parallel; results are combined
/// in a fixed order.
pub fn evaluate(model: &Model, ds: &SequenceDataset, shard_size: usize) -> Result<Evaluation> {
    check_model_data(model, ds)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let parts = shards(ds, &all, shard_size.max(1));
    let results: Vec<Result<ShardEval>> = parts
        .par_iter()
        .map(|idx| {
            let (x, t) = ds.batch(idx)?;
            let out = model.forward(&x, Mode::Eval, None)?;
            let loss = batch_loss(&out, &t)?.0 * idx.len() as f64;
            match t {
                Targets::Sequence(ts) => Ok((loss, out.data().to_vec(), ts.data().to_vec(), 0)),
                Targets::Classes(labels) => {
                    let last = out.steps() - 1;
                    let hits = labels
                        .iter()
                        .enumerate()
                        .filter(|&(b, &l)| argmax(out.row(last, b)) == l)
                        .count();
                    Ok((loss, Vec::new(), Vec::new(), hits))
                }
            }
        })
        .collect();
    let (mut loss, mut pred, mut target, mut hits) = (0.0, Vec::new(), Vec::new(), 0);
    for r in results {
        let (l, p, t, h) = r?;
        loss += l;
        pred.extend(p);
        target.extend(t);
        hits += h;
    }
    let n = ds.len() as f64;
    let loss = loss / n;
    Ok(match ds.targets {
        TargetSet::Classes { .. } => Evaluation {
            loss,
            nrmse: None,
            accuracy: Some(hits as f64 / n),
        },
        TargetSet::Sequences(_) => Evaluation {
            loss,
            nrmse: match nrmse(&pred, &target) {
                Ok(v) => Some(v),
                Err(Error::Domain(_)) => None,
                Err(e) => return Err(e),
            },
            accuracy: None,
        },
    })
}

/// Summary handed to the progress callback after every epoch.
#[derive(Debug, Clone)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub valid: Evaluation,
    pub improved: bool,
    pub wall_time: f64,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters from the epoch with the best validation score (the initial
    /// model if no epoch completed).
    pub best: Model,
    pub best_epoch: Option<usize>,
    /// Parameters at the end of the last completed epoch.
    pub last: Model,
    pub optimizer: OptimState,
    pub history: Vec<MetricRow>,
    /// Set when training stopped on a non-finite loss, gradient or
    /// parameter; holds the diagnostic.
    pub diverged: Option<String>,
    pub epochs_run: usize,
}

/// Batch-mean gradients over the given sequences, computed shard by shard
/// and reduced in shard order.
fn batch_gradients(
    model: &Model,
    ds: &SequenceDataset,
    idx: &[usize],
    masks: Option<&[DropoutMask]>,
    cfg: &TrainConfig,
) -> Result<(f64, ModelGrads)> {
    let mask_of: std::collections::HashMap<usize, &DropoutMask> = match masks {
        Some(m) => idx.iter().copied().zip(m.iter()).collect(),
        None => Default::default(),
    };
    let parts = shards(ds, idx, cfg.shard_size);
    let total = idx.len() as f64;
    let results: Vec<Result<(f64, ModelGrads)>> = parts
        .par_iter()
        .map(|part| {
            let (x, t) = ds.batch(part)?;
            let shard_masks: Option<Vec<DropoutMask>> =
                masks.map(|_| part.iter().map(|i| mask_of[i].clone()).collect());
            let r = model.loss_and_grad(&x, &t, Mode::Train, shard_masks.as_deref(), cfg.grad_mode)?;
            let w = part.len() as f64 / total;
            let mut g = r.grads;
            g.scale(w);
            Ok((r.loss * w, g))
        })
        .collect();
    let mut loss = 0.0;
    let mut grads = ModelGrads::zeros_like(model);
    for r in results {
        let (l, g) = r?;
        loss += l;
        grads.add_assign(&g);
    }
    Ok((loss, grads))
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Numerical(_))
}

/// Trains `model` on `train`, scoring every epoch on `valid`.
pub fn fit(model: Model, train: &SequenceDataset, valid: &SequenceDataset, cfg: &TrainConfig) -> Result<FitOutcome> {
    fit_with(model, train, valid, cfg, |_| {})
}

/// [`fit`] with a callback invoked after every completed epoch.
pub fn fit_with(
    mut model: Model,
    train: &SequenceDataset,
    valid: &SequenceDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<FitOutcome> {
    cfg.validate()?;
    model.validate()?;
    check_model_data(&model, train)?;
    check_model_data(&model, valid)?;
    if cfg.trainable == Trainable::ReadoutOnly && model.readout.is_none() {
        return Err(Error::Config("readout-only training needs an affine readout".into()));
    }
    let start = Instant::now();
    let mut opt = OptimState::new(cfg.optimizer, cfg.lr, &model);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    mask_rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best = model.clone();
    let mut best_epoch = None;
    let mut best_score: Option<f64> = None;
    let mut last = model.clone();
    let mut diverged = None;
    let mut epochs_run = 0;

    'epochs: for epoch in 1..=cfg.epochs {
        if cfg.lr_drop_epoch == Some(epoch) {
            opt.lr /= cfg.lr_drop_factor;
        }
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let masks: Option<Vec<DropoutMask>> = (model.config.dropout > 0.0).then(|| {
                idx.iter()
                    .map(|_| DropoutMask::sample(&model.config, &mut mask_rng))
                    .collect()
            });
            let step = batch_gradients(&model, train, idx, masks.as_deref(), cfg).and_then(|(loss, mut grads)| {
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite training loss {loss} in epoch {epoch}"
                    )));
                }
                if let Some(c) = cfg.clip {
                    clip_grad_norm(&mut grads, c, cfg.trainable);
                }
                opt.step(&mut model, &grads, cfg.trainable)?;
                Ok(loss)
            });
            match step {
                Ok(loss) => epoch_loss += loss * idx.len() as f64,
                Err(e) if is_divergence(&e) => {
                    diverged = Some(e.to_string());
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let train_loss = epoch_loss / train.len() as f64;
        let eval = match evaluate(&model, valid, cfg.shard_size) {
            Ok(v) if v.loss.is_finite() => v,
            Ok(v) => {
                diverged = Some(format!("non-finite validation loss {} in epoch {epoch}", v.loss));
                break;
            }
            Err(e) if is_divergence(&e) => {
                diverged = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let wall_time = start.elapsed().as_secs_f64();
        let row = |split, metric: &str, value| MetricRow {
            epoch,
            split,
            metric: metric.to_string(),
            value,
            wall_time,
        };
        history.push(row(Split::Train, "loss", train_loss));
        history.push(row(Split::Train, "lr", opt.lr));
        history.extend(eval.rows(epoch, Split::Valid, wall_time));

        let (score, higher) = eval.score();
        let improved = match best_score {
            None => true,
            Some(b) => (higher && score > b) || (!higher && score < b),
        };
        if improved {
            best_score = Some(score);
            best_epoch = Some(epoch);
            best = model.clone();
        }
        last = model.clone();
        epochs_run = epoch;
        on_epoch(&EpochReport {
            epoch,
            lr: opt.lr,
            train_loss,
            valid: eval,
            improved,
            wall_time,
        });
    }

    Ok(FitOutcome {
        best,
        best_epoch,
        last,
        optimizer: opt,
        history,
        diverged,
        epochs_run,
    })
}
