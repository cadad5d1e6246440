use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::artifact::Provenance;
use crate::data::{Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::model::Model;

use super::{alpha_grid, eigen_sweep, hutchinson, power_iteration, EigenPair, SplitLoss, SweepRow, TraceEstimate};

/// The Hessian is always taken of the mean task cross-entropy, without
/// balancing terms.
pub const LOSS_TAG: &str = "task_cross_entropy";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurvatureConfig {
    pub tol: f64,
    pub max_iters: usize,
    pub samples: usize,
    pub seed: u64,
    pub alphas: usize,
    pub alpha_range: f64,
    /// Rows per HVP chunk; results are combined in a fixed order.
    pub chunk: usize,
}

impl Default for CurvatureConfig {
    fn default() -> Self {
        CurvatureConfig { tol: 1e-3, max_iters: 200, samples: 100, seed: 0, alphas: 41, alpha_range: 1.0, chunk: 1024 }
    }
}

impl CurvatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iters == 0 || self.samples < 2 || self.chunk == 0 {
            return Err(Error::config("curvature needs tol > 0, max_iters >= 1, samples >= 2, chunk >= 1"));
        }
        if !(self.alpha_range.is_finite() && self.alpha_range >= 0.0) {
            return Err(Error::config("alpha_range must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvatureReport {
    pub split: SplitTag,
    pub split_size: usize,
    pub loss: &'static str,
    pub lambda_max: EigenPair,
    pub trace: TraceEstimate,
    pub sweep: Vec<SweepRow>,
    pub seed: u64,
}

/// Eigenpair, trace and eigenvector sweep of the task loss on one split.
pub fn analyze(model: &Model, ds: &Dataset, cfg: &CurvatureConfig) -> Result<CurvatureReport> {
    cfg.validate()?;
    let op = SplitLoss::new(model, ds, cfg.chunk)?;
    let lambda_max = power_iteration(&op, cfg.tol, cfg.max_iters, cfg.seed)?;
    let trace = hutchinson(&op, cfg.samples, cfg.seed)?;
    let sweep = eigen_sweep(model, &lambda_max.vector, &alpha_grid(cfg.alphas, cfg.alpha_range), ds, cfg.chunk)?;
    Ok(CurvatureReport {
        split: ds.split_tag(),
        split_size: ds.len(),
        loss: LOSS_TAG,
        lambda_max,
        trace,
        sweep,
        seed: cfg.seed,
    })
}

pub const CURVATURE_HEADER: &str = "metric,split,value,stderr_or_residual,iters_or_samples,seed";

/// Two rows per report: `lambda_max` and `trace`.
pub fn curvature_csv(reports: &[CurvatureReport], provenance: Option<&Provenance>) -> String {
    let mut out = provenance.map(Provenance::csv_comment).unwrap_or_default();
    out.push_str(CURVATURE_HEADER);
    out.push('\n');
    for r in reports {
        let s = r.split.as_str();
        let e = &r.lambda_max;
        let _ = writeln!(out, "lambda_max,{s},{},{},{},{}", e.value, e.residual, e.iterations, r.seed);
        let t = &r.trace;
        let _ = writeln!(out, "trace,{s},{},{},{},{}", t.estimate, t.stderr, t.samples, t.seed);
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow], provenance: Option<&Provenance>) -> String {
    let mut out = provenance.map(Provenance::csv_comment).unwrap_or_default();
    out.push_str("alpha,loss,flip_count\n");
    for r in rows {
        let flips = r.flip_count.map(|f| f.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{flips}", r.alpha, r.loss);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_clusters, SynthConfig};
    use crate::model::{HeadConfig, HeadKind, ModelConfig};

    #[test]
    fn report_rows_and_invariants() {
        let ds = synth_clusters(&SynthConfig { classes: 2, dim: 3, n_per_class: 8, ..Default::default() })
            .unwrap()
            .with_split(SplitTag::Train);
        let m = Model::build(ModelConfig {
            input_dim: 3,
            backbone: vec![],
            feature_dim: 3,
            head: HeadConfig { kind: HeadKind::Sparse, experts: 2, hidden: 2, k: 1 },
            classes: 2,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let cfg = CurvatureConfig { samples: 4, alphas: 5, tol: 1e-6, ..Default::default() };
        let r = analyze(&m, &ds, &cfg).unwrap();
        let n: f64 = r.lambda_max.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        assert_eq!(r.sweep[2].alpha, 0.0);
        assert_eq!(r.sweep[2].loss, m.eval_loss_with(&m.params.values, &ds, cfg.chunk).unwrap());
        let csv = curvature_csv(&[r.clone(), CurvatureReport { split: SplitTag::Test, ..r.clone() }], None);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CURVATURE_HEADER);
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("lambda_max,train,") && lines[4].starts_with("trace,test,"));
        let sweep = sweep_csv(&r.sweep, None);
        assert_eq!(sweep.lines().count(), 6);
        assert!(sweep.lines().nth(3).unwrap().ends_with(",0"));
    }
}
