//! Hessian sharpness: dominant eigenpair by power iteration, trace by
//! Hutchinson's estimator, and loss sweeps along a direction.

mod report;

use crate::autodiff::{gradient, hvp, loss_value, Graph, Objective, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{streams, Rng};
use crate::tensor::{Scalar, Tensor};

pub use report::{analyze, curvature_csv, sweep_csv, CurvatureConfig, CurvatureReport, LOSS_TAG};

/// Anything that can multiply a vector by a symmetric Hessian.
pub trait HessianOperator {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;
}

/// Hessian of an [`Objective`] at a fixed point.
pub struct ObjectiveHessian<'a, O: Objective> {
    pub objective: &'a O,
    pub at: &'a [f64],
}

impl<O: Objective> HessianOperator for ObjectiveHessian<'_, O> {
    fn dim(&self) -> usize {
        self.at.len()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        hvp(self.objective, self.at, v)
    }
}

/// Mean task cross-entropy of a model on one batch, with eval-mode routing.
/// The top-k selection is fixed by the real part of the logits, so its
/// Hessian is that of the current piecewise-smooth region.
pub struct ModelLoss<'a> {
    pub model: &'a Model,
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl Objective for ModelLoss<'_> {
    fn num_params(&self) -> usize {
        self.model.num_params()
    }

    fn eval<S: Scalar>(&self, g: &mut Graph<S>, params: &Var<S>) -> Result<Var<S>> {
        let x = g.constant(Tensor::from_f64(&self.x));
        let fwd = self.model.forward(g, params, &x, None)?;
        g.cross_entropy(&fwd.logits, &self.labels)
    }
}

/// Mean task loss over a whole split, evaluated chunk by chunk in a fixed
/// order and combined with size weights.
pub struct SplitLoss<'a> {
    model: &'a Model,
    chunks: Vec<ModelLoss<'a>>,
    total: usize,
}

impl<'a> SplitLoss<'a> {
    pub fn new(model: &'a Model, ds: &Dataset, chunk: usize) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::usage("curvature needs a nonempty split"));
        }
        let chunk = chunk.max(1);
        let chunks = (0..ds.len())
            .step_by(chunk)
            .map(|s| {
                let b = ds.batch(&(s..(s + chunk).min(ds.len())).collect::<Vec<_>>());
                ModelLoss { model, x: b.x, labels: b.labels }
            })
            .collect();
        Ok(SplitLoss { model, chunks, total: ds.len() })
    }

    fn weight(&self, c: &ModelLoss<'_>) -> f64 {
        c.labels.len() as f64 / self.total as f64
    }

    pub fn loss_at(&self, params: &[f64]) -> Result<f64> {
        let mut acc = 0.0;
        for c in &self.chunks {
            acc += self.weight(c) * loss_value(c, params)?;
        }
        Ok(acc)
    }

    pub fn gradient_at(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut loss = 0.0;
        let mut grad = vec![0.0; params.len()];
        for c in &self.chunks {
            let w = self.weight(c);
            let (l, g) = gradient(c, params)?;
            loss += w * l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += w * b;
            }
        }
        Ok((loss, grad))
    }

    pub fn hvp_at(&self, params: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; params.len()];
        for c in &self.chunks {
            let w = self.weight(c);
            for (a, b) in out.iter_mut().zip(hvp(c, params, v)?) {
                *a += w * b;
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

impl HessianOperator for SplitLoss<'_> {
    fn dim(&self) -> usize {
        self.model.num_params()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.hvp_at(&self.model.params.values, v)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigenPair {
    /// Rayleigh quotient of `vector`.
    pub value: f64,
    /// Unit norm.
    pub vector: Vec<f64>,
    pub iterations: usize,
    /// `‖Hv − λv‖ / |λ|`.
    pub residual: f64,
    pub converged: bool,
}

/// Dominant (largest-magnitude) eigenpair by power iteration from a seeded
/// Gaussian start. Converged when the relative change in the eigenvalue
/// estimate and the relative residual are both below `tol`; otherwise the
/// result is returned with `converged = false`.
pub fn power_iteration(op: &impl HessianOperator, tol: f64, max_iters: usize, seed: u64) -> Result<EigenPair> {
    let n = op.dim();
    let mut rng = Rng::new(seed, streams::POWER);
    let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let nv = norm(&v);
    if !(nv > 0.0) {
        return Err(Error::numeric("lambda_max", "zero starting vector"));
    }
    v.iter_mut().for_each(|x| *x /= nv);
    let mut prev: Option<f64> = None;
    let mut last =
        EigenPair { value: 0.0, vector: v.clone(), iterations: 0, residual: f64::INFINITY, converged: false };
    for it in 1..=max_iters.max(1) {
        let w = op.apply(&v)?;
        let lambda = dot(&v, &w);
        let nw = norm(&w);
        if !(nw > 0.0) || lambda == 0.0 {
            return Err(Error::numeric("lambda_max", "Hessian-vector product vanished"));
        }
        let residual = norm(&w.iter().zip(&v).map(|(a, b)| a - lambda * b).collect::<Vec<_>>()) / lambda.abs();
        let stable = prev.is_some_and(|p| ((lambda - p) / lambda).abs() < tol);
        last = EigenPair {
            value: lambda,
            vector: v.clone(),
            iterations: it,
            residual,
            converged: stable && residual < tol,
        };
        if last.converged {
            break;
        }
        prev = Some(lambda);
        v = w.iter().map(|x| x / nw).collect();
    }
    Ok(last)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEstimate {
    pub estimate: f64,
    /// Sample standard deviation over `√samples`.
    pub stderr: f64,
    pub samples: usize,
    pub seed: u64,
}

/// Hutchinson estimate `mean_s zₛᵀ H zₛ` with Rademacher `zₛ`.
pub fn hutchinson(op: &impl HessianOperator, samples: usize, seed: u64) -> Result<TraceEstimate> {
    if samples < 2 {
        return Err(Error::usage("trace estimation needs at least 2 samples"));
    }
    let mut rng = Rng::new(seed, streams::HUTCHINSON);
    let mut values = Vec::with_capacity(samples);
    for _ in 0..samples {
        let z: Vec<f64> = (0..op.dim()).map(|_| rng.rademacher()).collect();
        values.push(dot(&z, &op.apply(&z)?));
    }
    let n = samples as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(TraceEstimate { estimate: mean, stderr: (var / n).sqrt(), samples, seed })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub loss: f64,
    /// Inputs whose selected expert set differs from the unperturbed model.
    pub flip_count: Option<usize>,
}

/// `n` evenly spaced points on `[-range, range]`, with the midpoint exactly 0
/// when `n` is odd.
pub fn alpha_grid(n: usize, range: f64) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => {
            let half = (n - 1) as f64 / 2.0;
            (0..n).map(|i| range * (i as f64 - half) / half).collect()
        }
    }
}

fn perturbed(theta: &[f64], v: &[f64], alpha: f64) -> Vec<f64> {
    if alpha == 0.0 {
        return theta.to_vec();
    }
    theta.iter().zip(v).map(|(t, d)| t + alpha * d).collect()
}

fn check_unit(v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::usage(format!("direction has {} entries, expected {n}", v.len())));
    }
    let nv = norm(v);
    if (nv - 1.0).abs() > 1e-6 {
        return Err(Error::usage(format!("direction must be unit norm, got {nv}")));
    }
    Ok(())
}

/// Loss of an objective at `θ + α·v` for each α.
pub fn objective_sweep<O: Objective>(f: &O, theta: &[f64], v: &[f64], alphas: &[f64]) -> Result<Vec<SweepRow>> {
    check_unit(v, theta.len())?;
    alphas
        .iter()
        .map(|&alpha| Ok(SweepRow { alpha, loss: loss_value(f, &perturbed(theta, v, alpha))?, flip_count: None }))
        .collect()
}

fn selections(model: &Model, values: &[f64], ds: &Dataset, chunk: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(ds.len());
    for s in (0..ds.len()).step_by(chunk.max(1)) {
        let b = ds.batch(&(s..(s + chunk.max(1)).min(ds.len())).collect::<Vec<_>>());
        let p = model.predict_with(values, &b.x)?;
        out.extend(p.decisions.unwrap_or_default().into_iter().map(|d| d.selected_set()));
    }
    Ok(out)
}

/// Per-α count of inputs whose eval-mode expert selection at `θ + α·v`
/// differs from that at `θ`.
pub fn routing_flip_count(model: &Model, v: &[f64], alphas: &[f64], ds: &Dataset, chunk: usize) -> Result<Vec<usize>> {
    if !model.head_kind().is_top_k() {
        return Err(Error::usage(format!(
            "routing flips need a sparse or hard head, model has a {} head",
            model.head_kind().as_str()
        )));
    }
    check_unit(v, model.num_params())?;
    let theta = &model.params.values;
    let base = selections(model, theta, ds, chunk)?;
    alphas
        .iter()
        .map(|&a| {
            let sel = selections(model, &perturbed(theta, v, a), ds, chunk)?;
            Ok(sel.iter().zip(&base).filter(|(x, y)| x != y).count())
        })
        .collect()
}

/// Task loss along `θ + α·v`, recomputing routing at every point. The
/// model's own parameters are only read.
pub fn eigen_sweep(model: &Model, v: &[f64], alphas: &[f64], ds: &Dataset, chunk: usize) -> Result<Vec<SweepRow>> {
    check_unit(v, model.num_params())?;
    let theta = &model.params.values;
    let flips =
        if model.head_kind().is_top_k() { Some(routing_flip_count(model, v, alphas, ds, chunk)?) } else { None };
    alphas
        .iter()
        .enumerate()
        .map(|(i, &alpha)| {
            Ok(SweepRow {
                alpha,
                loss: model.eval_loss_with(&perturbed(theta, v, alpha), ds, chunk)?,
                flip_count: flips.as_ref().map(|f| f[i]),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_clusters, SynthConfig};
    use crate::model::{HeadConfig, HeadKind, ModelConfig};

    /// ½ θᵀ diag(d) θ, optionally scaled.
    struct Quadratic(Vec<f64>, f64);

    impl Objective for Quadratic {
        fn num_params(&self) -> usize {
            self.0.len()
        }

        fn eval<S: Scalar>(&self, g: &mut Graph<S>, p: &Var<S>) -> Result<Var<S>> {
            let d = g.constant(Tensor::new(vec![self.0.len()], self.0.iter().map(|&x| S::from_f64(x)).collect())?);
            let sq = g.square(p)?;
            let w = g.mul(&sq, &d)?;
            let s = g.sum(&w, None)?;
            g.scale(&s, 0.5 * self.1)
        }
    }

    #[test]
    fn power_iteration_on_diagonal_quadratic() {
        let f = Quadratic(vec![3.0, 1.0], 1.0);
        let at = [0.2, -0.4];
        let e = power_iteration(&ObjectiveHessian { objective: &f, at: &at }, 1e-10, 200, 0).unwrap();
        assert!(e.converged);
        assert!((e.value - 3.0).abs() < 1e-9);
        assert!((e.vector[0].abs() - 1.0).abs() < 1e-9 && e.vector[1].abs() < 1e-5);
        assert!((norm(&e.vector) - 1.0).abs() < 1e-9);

        let scaled = Quadratic(vec![3.0, 1.0], 2.5);
        let s = power_iteration(&ObjectiveHessian { objective: &scaled, at: &at }, 1e-10, 200, 0).unwrap();
        assert!((s.value - 7.5).abs() < 1e-8);
        assert!((dot(&s.vector, &e.vector).abs() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn power_iteration_flags_non_convergence() {
        let f = Quadratic(vec![1.0, 0.999], 1.0);
        let at = [0.0, 0.0];
        let e = power_iteration(&ObjectiveHessian { objective: &f, at: &at }, 1e-12, 3, 0).unwrap();
        assert!(!e.converged);
        assert_eq!(e.iterations, 3);
    }

    #[test]
    fn zero_hessian_is_numeric_error() {
        let f = Quadratic(vec![0.0, 0.0], 1.0);
        let at = [1.0, 1.0];
        assert!(matches!(
            power_iteration(&ObjectiveHessian { objective: &f, at: &at }, 1e-3, 10, 0),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn hutchinson_is_exact_for_diagonal_hessian() {
        let f = Quadratic(vec![3.0, 1.0], 1.0);
        let at = [0.5, 0.5];
        let t = hutchinson(&ObjectiveHessian { objective: &f, at: &at }, 20, 1).unwrap();
        assert_eq!(t.estimate, 4.0);
        assert_eq!(t.stderr, 0.0);
        assert!(hutchinson(&ObjectiveHessian { objective: &f, at: &at }, 1, 1).is_err());
    }

    #[test]
    fn quadratic_sweep_is_analytic_and_symmetric() {
        let f = Quadratic(vec![3.0, 1.0], 1.0);
        let theta = [0.0, 0.0];
        let alphas = alpha_grid(41, 1.0);
        assert_eq!(alphas[20], 0.0);
        let rows = objective_sweep(&f, &theta, &[1.0, 0.0], &alphas).unwrap();
        let base = rows[20].loss;
        for r in &rows {
            assert!((r.loss - base - 1.5 * r.alpha * r.alpha).abs() < 1e-9);
        }
        for i in 0..41 {
            assert!((rows[i].loss - rows[40 - i].loss).abs() < 1e-9);
        }
        assert!(objective_sweep(&f, &theta, &[2.0, 0.0], &alphas).is_err());
    }

    fn tiny(kind: HeadKind) -> (Model, Dataset) {
        let ds = synth_clusters(&SynthConfig { classes: 3, dim: 4, n_per_class: 10, ..Default::default() }).unwrap();
        let k = if kind == HeadKind::Hard { 1 } else { 2 };
        let m = Model::build(ModelConfig {
            input_dim: 4,
            backbone: vec![],
            feature_dim: 3,
            head: HeadConfig { kind, experts: 3, hidden: 3, k },
            classes: 3,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        (m, ds)
    }

    #[test]
    fn model_sweep_restores_and_matches_base_loss() {
        let (m, ds) = tiny(HeadKind::Sparse);
        let before = m.clone();
        let mut v: Vec<f64> = (0..m.num_params()).map(|i| (i as f64 * 0.37).sin()).collect();
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        let rows = eigen_sweep(&m, &v, &alpha_grid(5, 1.0), &ds, 7).unwrap();
        assert_eq!(rows[2].loss, m.eval_loss_with(&m.params.values, &ds, 7).unwrap());
        assert_eq!(rows[2].flip_count, Some(0));
        assert_eq!(m, before);
    }

    #[test]
    fn flips_require_top_k_head() {
        let (m, ds) = tiny(HeadKind::Soft);
        let mut v = vec![0.0; m.num_params()];
        v[0] = 1.0;
        assert!(matches!(routing_flip_count(&m, &v, &[0.5], &ds, 8), Err(Error::Usage(_))));
        let rows = eigen_sweep(&m, &v, &[0.0], &ds, 8).unwrap();
        assert_eq!(rows[0].flip_count, None);
    }

    #[test]
    fn split_loss_is_chunk_invariant() {
        let (m, ds) = tiny(HeadKind::Dense);
        let a = SplitLoss::new(&m, &ds, 30).unwrap();
        let b = SplitLoss::new(&m, &ds, 7).unwrap();
        let v: Vec<f64> = (0..m.num_params()).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
        let (ha, hb) = (a.apply(&v).unwrap(), b.apply(&v).unwrap());
        for (x, y) in ha.iter().zip(&hb) {
            assert!((x - y).abs() < 1e-12 * (1.0 + x.abs()));
        }
        assert!((a.loss_at(&m.params.values).unwrap() - b.loss_at(&m.params.values).unwrap()).abs() < 1e-12);
    }
}
