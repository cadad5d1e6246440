//! Momentum SGD with coupled weight decay, per-epoch metrics and best-on-validation selection.

mod metrics;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::moe::RoutingAccumulator;
use crate::rng::{streams, Rng};

pub use metrics::{epoch_to_threshold, metrics_csv, EpochRow, RunMetrics, Summary, METRICS_HEADER};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Cosine-anneal the learning rate to zero over `epochs`.
    pub cosine: bool,
    /// Rows per forward pass when evaluating accuracy.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            cosine: false,
            eval_batch: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::config("epochs, batch_size and eval_batch must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.cosine {
            0.5 * self.lr * (1.0 + (std::f64::consts::PI * epoch as f64 / self.epochs as f64).cos())
        } else {
            self.lr
        }
    }
}

/// One update: `g' = g + wd·θ`, `v ← μ·v + g'`, `θ ← θ − lr·v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(Error::usage(format!(
            "sgd_step: {} params, {} grads, {} velocity",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric("sgd_step", format!("non-finite gradient at index {i}")));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
    Ok(())
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: RunMetrics,
    /// Parameters at the epoch with the highest validation accuracy.
    pub best: Model,
}

/// Trains `model` in place. `on_epoch` sees the metrics after every epoch and
/// whether that epoch set a new best validation accuracy, so callers can flush
/// artifacts before a later epoch fails.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&RunMetrics, &Model, bool) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::usage("training needs nonempty train and validation splits"));
    }
    let experts = model.config.experts();
    let mut shuffle = Rng::new(cfg.seed, streams::SHUFFLE);
    let mut noise = Rng::new(cfg.seed, streams::NOISE);
    let mut velocity = vec![0.0; model.num_params()];
    let mut metrics = RunMetrics::new(cfg.seed, experts);
    let mut best = model.clone();
    let mut best_val = f64::NEG_INFINITY;

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch - 1);
        let mut sums = [0.0f64; 3];
        let mut seen = 0usize;
        let mut util = RoutingAccumulator::new(experts, train_set.classes());
        for batch in train_set.batches(cfg.batch_size, &mut shuffle, false) {
            let mut g = Graph::<f64>::new();
            let theta = model.theta(&mut g)?;
            let x = g.constant(batch.x);
            let (parts, fwd) =
                model.loss(&mut g, &theta, &x, &batch.labels, Some(&mut noise)).map_err(|e| diverged(epoch, e))?;
            let grads = g.backward(&parts.total)?.take(&theta).map(|t| t.into_data());
            let grads = grads.unwrap_or_else(|| vec![0.0; velocity.len()]);
            sgd_step(&mut model.params.values, &grads, &mut velocity, lr, cfg.momentum, cfg.weight_decay)
                .map_err(|e| diverged(epoch, e))?;
            let b = batch.labels.len() as f64;
            sums[0] += parts.total.item() * b;
            sums[1] += parts.task.item() * b;
            sums[2] += parts.aux.as_ref().map_or(0.0, |a| a.item()) * b;
            seen += batch.labels.len();
            if let Some(r) = &fwd.routing {
                util.add_batch(r.weights.value().data(), &batch.labels)?;
            }
        }
        if !sums.iter().all(|s| s.is_finite()) {
            return Err(diverged(epoch, Error::numeric("train", "loss is not finite")));
        }
        let (train_acc, _) = model.evaluate(train_set, cfg.eval_batch)?;
        let (val_acc, _) = model.evaluate(val_set, cfg.eval_batch)?;
        let n = seen as f64;
        metrics.push(EpochRow {
            epoch,
            train_loss: sums[0] / n,
            task_loss: sums[1] / n,
            aux_loss: sums[2] / n,
            train_acc,
            val_acc,
            utilization: if util.is_empty() { Vec::new() } else { util.finish()?.utilization },
        });
        let improved = val_acc > best_val;
        if improved {
            best_val = val_acc;
            best = model.clone();
        }
        on_epoch(&metrics, &best, improved)?;
    }
    Ok(TrainOutcome { metrics, best })
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::Numeric { op, detail } => Error::Numeric { op, detail: format!("diverged in epoch {epoch}: {detail}") },
        other => other,
    }
}
