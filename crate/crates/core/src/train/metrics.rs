use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::artifact::Provenance;
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,train_loss,task_loss,aux_loss,train_acc,val_acc";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub task_loss: f64,
    pub aux_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub utilization: Vec<f64>,
}

/// Maximum of a series and the 1-based epoch where it first occurs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub max_train_acc: f64,
    pub ett_train_acc: usize,
    pub max_val_acc: f64,
    pub ett_val_acc: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub experts: usize,
    pub rows: Vec<EpochRow>,
    pub best_checkpoint: Option<PathBuf>,
}

impl RunMetrics {
    pub fn new(seed: u64, experts: usize) -> Self {
        RunMetrics { seed, experts, rows: Vec::new(), best_checkpoint: None }
    }

    pub fn push(&mut self, row: EpochRow) {
        self.rows.push(row);
    }

    pub fn summary(&self) -> Result<Summary> {
        let train: Vec<f64> = self.rows.iter().map(|r| r.train_acc).collect();
        let val: Vec<f64> = self.rows.iter().map(|r| r.val_acc).collect();
        let ett_train = epoch_to_threshold(&train)?;
        let ett_val = epoch_to_threshold(&val)?;
        Ok(Summary {
            max_train_acc: train[ett_train - 1],
            ett_train_acc: ett_train,
            max_val_acc: val[ett_val - 1],
            ett_val_acc: ett_val,
            seed: self.seed,
        })
    }

    /// Utilization vector of the last epoch.
    pub fn final_utilization(&self) -> Option<&[f64]> {
        self.rows.last().map(|r| r.utilization.as_slice()).filter(|u| !u.is_empty())
    }
}

/// 1-based index of the first occurrence of the series maximum.
pub fn epoch_to_threshold(series: &[f64]) -> Result<usize> {
    if series.is_empty() {
        return Err(Error::usage("epoch_to_threshold on an empty series"));
    }
    let mut best = 0;
    for (i, &v) in series.iter().enumerate() {
        if v > series[best] {
            best = i;
        }
    }
    Ok(best + 1)
}

/// Metrics as CSV, one row per epoch, with `util_i` columns for MoE heads.
pub fn metrics_csv(m: &RunMetrics, provenance: Option<&Provenance>) -> String {
    let mut out = provenance.map(Provenance::csv_comment).unwrap_or_default();
    out.push_str(METRICS_HEADER);
    for i in 0..m.experts {
        let _ = write!(out, ",util_{i}");
    }
    out.push('\n');
    for r in &m.rows {
        let _ =
            write!(out, "{},{},{},{},{},{}", r.epoch, r.train_loss, r.task_loss, r.aux_loss, r.train_acc, r.val_acc);
        for u in &r.utilization {
            let _ = write!(out, ",{u}");
        }
        out.push('\n');
    }
    out
}
