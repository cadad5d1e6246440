use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{streams, Rng};

use super::Dataset;

/// Gaussian blobs; each class owns `clusters_per_class` centers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub classes: usize,
    pub clusters_per_class: usize,
    pub dim: usize,
    pub n_per_class: usize,
    /// Standard deviation of points around their center.
    pub spread: f64,
    /// Standard deviation of the center coordinates.
    pub center_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            classes: 10,
            clusters_per_class: 2,
            dim: 32,
            n_per_class: 100,
            spread: 0.6,
            center_scale: 1.0,
        }
    }
}

impl SynthConfig {
    /// Cluster centers, class-major: center `c·clusters_per_class + j` belongs to class `c`.
    pub fn centers(&self) -> Vec<Vec<f64>> {
        let mut rng = Rng::new(self.seed, streams::SYNTH);
        (0..self.classes * self.clusters_per_class)
            .map(|_| (0..self.dim).map(|_| self.center_scale * rng.normal()).collect())
            .collect()
    }
}

/// Balanced clustered dataset; point `i` of class `c` sits around center
/// `i mod clusters_per_class` of that class.
pub fn synth_clusters(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.classes == 0 || cfg.clusters_per_class == 0 || cfg.dim == 0 || cfg.n_per_class == 0 {
        return Err(Error::usage("synthetic dataset counts must be at least 1"));
    }
    if !(cfg.spread > 0.0) || !(cfg.center_scale > 0.0) {
        return Err(Error::usage("synthetic spread and center scale must be positive"));
    }
    let centers = cfg.centers();
    let mut rng = Rng::new(cfg.seed, streams::SYNTH + (1 << 32));
    let n = cfg.classes * cfg.n_per_class;
    let mut features = Vec::with_capacity(n * cfg.dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..cfg.classes {
        for i in 0..cfg.n_per_class {
            let center = &centers[c * cfg.clusters_per_class + i % cfg.clusters_per_class];
            features.extend(center.iter().map(|m| m + cfg.spread * rng.normal()));
            labels.push(c);
        }
    }
    Dataset::new(features, cfg.dim, labels, cfg.classes, cfg.dim, format!("synthetic(seed={})", cfg.seed))
}
