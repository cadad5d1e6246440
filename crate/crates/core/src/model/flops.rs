use serde::{Deserialize, Serialize};

use super::{HeadKind, ModelConfig};

/// Multiply-accumulate counts for one input at inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopCount {
    pub backbone: u64,
    pub gate: u64,
    /// Expert (or dense head) MACs actually evaluated.
    pub experts_active: u64,
    /// Expert MACs if every expert were evaluated.
    pub experts_total: u64,
}

impl FlopCount {
    pub fn head(&self) -> u64 {
        self.gate + self.experts_active
    }

    pub fn total(&self) -> u64 {
        self.backbone + self.head()
    }

    pub fn active_ratio(&self) -> f64 {
        self.experts_active as f64 / self.experts_total as f64
    }
}

pub fn count_flops(cfg: &ModelConfig) -> FlopCount {
    let backbone = cfg.backbone_layers().iter().map(|&(i, o)| (i * o) as u64).sum();
    let (d, h, c) = (cfg.feature_dim as u64, cfg.head.hidden as u64, cfg.classes as u64);
    let per_expert = d * h + h * c;
    let n = cfg.head.experts as u64;
    let (gate, active, total) = match cfg.head.kind {
        HeadKind::Dense => (0, per_expert, per_expert),
        HeadKind::Soft => (d * n, n * per_expert, n * per_expert),
        HeadKind::Sparse | HeadKind::Hard => (d * n, cfg.head.k as u64 * per_expert, n * per_expert),
    };
    FlopCount { backbone, gate, experts_active: active, experts_total: total }
}
