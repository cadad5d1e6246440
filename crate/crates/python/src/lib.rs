//! Python bindings. Matrices cross the boundary as lists of rows.

use std::collections::BTreeMap;
use std::path::PathBuf;

use moe_lab::bench::{bench, BenchConfig};
use moe_lab::curvature::{eigen_sweep, hutchinson, power_iteration, SplitLoss};
use moe_lab::data::{load_splits, DataConfig, Dataset, SplitTag, SynthConfig};
use moe_lab::model::{
    count_flops, load_checkpoint, save_checkpoint, HeadConfig, HeadKind, LossWeights, Model, ModelConfig,
};
use moe_lab::moe::routing_stats;
use moe_lab::tensor::Tensor;
use moe_lab::train::{train, TrainConfig};
use moe_lab::Error;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Usage(_) | Error::Config(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } | Error::Format(_) => PyOSError::new_err(e.to_string()),
        Error::Numeric { .. } | Error::Internal(_) => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Flattens rows into a `rows × cols` tensor, rejecting ragged input.
pub fn rows_to_tensor(rows: &[Vec<f64>]) -> Result<Tensor, Error> {
    if rows.is_empty() {
        return Err(Error::usage("empty input"));
    }
    Tensor::from_rows(rows)
}

pub fn tensor_to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    match t.shape() {
        [_, c] if *c > 0 => t.data().chunks(*c).map(<[f64]>::to_vec).collect(),
        _ => vec![t.data().to_vec()],
    }
}

const CHUNK: usize = 1024;

type Rows = Vec<Vec<f64>>;

#[pyclass(name = "Dataset", module = "moe_lab", from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (features, labels, classes))]
    fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> PyResult<Self> {
        let x = rows_to_tensor(&features).map_err(py_err)?;
        let dim = x.shape()[1];
        Dataset::new(x.into_data(), dim, labels, classes, 1, "python").map(|inner| PyDataset { inner }).map_err(py_err)
    }

    /// Gaussian-cluster dataset, unnormalized and unsplit.
    #[staticmethod]
    #[pyo3(signature = (classes=10, dim=32, n_per_class=100, seed=0))]
    fn synthetic(classes: usize, dim: usize, n_per_class: usize, seed: u64) -> PyResult<Self> {
        let cfg = SynthConfig { classes, dim, n_per_class, seed, ..Default::default() };
        moe_lab::data::synth_clusters(&cfg).map(|inner| PyDataset { inner }).map_err(py_err)
    }

    /// Normalized `(train, val, test)` splits from a data config given as JSON.
    #[staticmethod]
    #[pyo3(signature = (config_json="{}"))]
    fn splits(config_json: &str) -> PyResult<(Self, Self, Self)> {
        let cfg: DataConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let s = load_splits(&cfg).map_err(py_err)?;
        Ok((PyDataset { inner: s.train }, PyDataset { inner: s.val }, PyDataset { inner: s.test }))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn split(&self) -> &'static str {
        self.inner.split_tag().as_str()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    fn features(&self) -> Vec<Vec<f64>> {
        self.inner.features().chunks(self.inner.dim()).map(<[f64]>::to_vec).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(len={}, dim={}, classes={}, split={})",
            self.inner.len(),
            self.inner.dim(),
            self.inner.classes(),
            self.split()
        )
    }
}

#[pyclass(name = "Model", module = "moe_lab", from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (
        input_dim, classes, head="sparse", experts=8, hidden=64, k=2,
        backbone=vec![256, 256], feature_dim=128, seed=0, kl=0.01, importance=0.01, load=0.01
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        input_dim: usize,
        classes: usize,
        head: &str,
        experts: usize,
        hidden: usize,
        k: usize,
        backbone: Vec<usize>,
        feature_dim: usize,
        seed: u64,
        kl: f64,
        importance: f64,
        load: f64,
    ) -> PyResult<Self> {
        let kind: HeadKind = head.parse().map_err(py_err)?;
        let cfg = ModelConfig {
            input_dim,
            backbone,
            feature_dim,
            head: HeadConfig { kind, experts, hidden, k },
            classes,
            loss_weights: LossWeights { kl, importance, load },
            seed,
        };
        Model::build(cfg).map(|inner| PyModel { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_checkpoint(&path).map(|c| PyModel { inner: c.model }).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner, &BTreeMap::new()).map_err(py_err)
    }

    #[getter]
    fn head(&self) -> &'static str {
        self.inner.head_kind().as_str()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn head_param_count(&self) -> usize {
        self.inner.config.head_param_count()
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn parameters(&self) -> Vec<f64> {
        self.inner.params.values.clone()
    }

    fn set_parameters(&mut self, values: Vec<f64>) -> PyResult<()> {
        self.inner = Model::with_values(self.inner.config.clone(), values).map_err(py_err)?;
        Ok(())
    }

    fn flops<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let f = count_flops(&self.inner.config);
        let d = PyDict::new(py);
        d.set_item("backbone", f.backbone)?;
        d.set_item("gate", f.gate)?;
        d.set_item("experts_active", f.experts_active)?;
        d.set_item("experts_total", f.experts_total)?;
        d.set_item("active_ratio", f.active_ratio())?;
        Ok(d)
    }

    /// Eval-mode logits and, for gated heads, the selected experts per row.
    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<(Rows, Option<Vec<Vec<usize>>>)> {
        let t = rows_to_tensor(&x).map_err(py_err)?;
        let p = self.inner.predict(&t).map_err(py_err)?;
        let selected = p.decisions.map(|ds| ds.into_iter().map(|d| d.selected).collect());
        Ok((tensor_to_rows(&p.logits), selected))
    }

    fn accuracy(&self, ds: &PyDataset) -> PyResult<f64> {
        self.inner.evaluate(&ds.inner, CHUNK).map(|(a, _)| a).map_err(py_err)
    }

    /// Mean task cross-entropy with eval-mode routing.
    fn loss(&self, ds: &PyDataset) -> PyResult<f64> {
        self.inner.eval_loss_with(&self.inner.params.values, &ds.inner, CHUNK).map_err(py_err)
    }

    fn gradient(&self, ds: &PyDataset) -> PyResult<(f64, Vec<f64>)> {
        let op = SplitLoss::new(&self.inner, &ds.inner, CHUNK).map_err(py_err)?;
        op.gradient_at(&self.inner.params.values).map_err(py_err)
    }

    fn hvp(&self, ds: &PyDataset, v: Vec<f64>) -> PyResult<Vec<f64>> {
        let op = SplitLoss::new(&self.inner, &ds.inner, CHUNK).map_err(py_err)?;
        op.hvp_at(&self.inner.params.values, &v).map_err(py_err)
    }

    /// Trains with SGD and keeps the parameters of the best validation epoch.
    /// Returns one dict per epoch.
    #[pyo3(signature = (train_set, val_set, epochs=60, batch_size=64, lr=0.05, momentum=0.9, weight_decay=5e-4, seed=0, cosine=false))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        train_set: &PyDataset,
        val_set: &PyDataset,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
        seed: u64,
        cosine: bool,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let cfg = TrainConfig { epochs, batch_size, lr, momentum, weight_decay, seed, cosine, ..Default::default() };
        let mut model = self.inner.clone();
        let out = train(&mut model, &train_set.inner, &val_set.inner, &cfg, |_, _, _| Ok(())).map_err(py_err)?;
        self.inner = out.best;
        out.metrics
            .rows
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("epoch", r.epoch)?;
                d.set_item("train_loss", r.train_loss)?;
                d.set_item("task_loss", r.task_loss)?;
                d.set_item("aux_loss", r.aux_loss)?;
                d.set_item("train_acc", r.train_acc)?;
                d.set_item("val_acc", r.val_acc)?;
                d.set_item("utilization", r.utilization.clone())?;
                Ok(d)
            })
            .collect()
    }

    #[pyo3(signature = (ds, tol=1e-3, max_iters=200, seed=0))]
    fn lambda_max<'py>(
        &self,
        py: Python<'py>,
        ds: &PyDataset,
        tol: f64,
        max_iters: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let op = SplitLoss::new(&self.inner, &ds.inner, CHUNK).map_err(py_err)?;
        let e = power_iteration(&op, tol, max_iters, seed).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("value", e.value)?;
        d.set_item("vector", e.vector)?;
        d.set_item("iterations", e.iterations)?;
        d.set_item("residual", e.residual)?;
        d.set_item("converged", e.converged)?;
        Ok(d)
    }

    #[pyo3(signature = (ds, samples=100, seed=0))]
    fn hessian_trace(&self, ds: &PyDataset, samples: usize, seed: u64) -> PyResult<(f64, f64)> {
        let op = SplitLoss::new(&self.inner, &ds.inner, CHUNK).map_err(py_err)?;
        hutchinson(&op, samples, seed).map(|t| (t.estimate, t.stderr)).map_err(py_err)
    }

    /// `(alpha, loss, flip_count)` along a unit direction.
    fn eigen_sweep(
        &self,
        ds: &PyDataset,
        direction: Vec<f64>,
        alphas: Vec<f64>,
    ) -> PyResult<Vec<(f64, f64, Option<usize>)>> {
        eigen_sweep(&self.inner, &direction, &alphas, &ds.inner, CHUNK)
            .map(|rows| rows.into_iter().map(|r| (r.alpha, r.loss, r.flip_count)).collect())
            .map_err(py_err)
    }

    fn routing<'py>(&self, py: Python<'py>, ds: &PyDataset) -> PyResult<Bound<'py, PyDict>> {
        let (_, decisions) = self.inner.evaluate(&ds.inner, CHUNK).map_err(py_err)?;
        let decisions = decisions.ok_or_else(|| PyValueError::new_err("routing needs a mixture-of-experts head"))?;
        let s = routing_stats(&decisions, ds.inner.labels(), ds.inner.classes()).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("utilization", s.utilization.clone())?;
        d.set_item("entropy", s.utilization_entropy())?;
        d.set_item("class_expert", s.class_expert.clone())?;
        d.set_item("class_counts", s.class_counts.clone())?;
        Ok(d)
    }

    #[pyo3(signature = (name, batch_sizes=vec![1, 32, 256], warmup=10, measured=100, seed=0))]
    fn bench<'py>(
        &self,
        py: Python<'py>,
        name: &str,
        batch_sizes: Vec<usize>,
        warmup: usize,
        measured: usize,
        seed: u64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let cfg = BenchConfig { batch_sizes, warmup, measured, seed, ..Default::default() };
        let rows = bench(name, &self.inner, &cfg).map_err(py_err)?;
        rows.into_iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("model", r.model)?;
                d.set_item("batch_size", r.batch_size)?;
                d.set_item("params_m", r.params_m)?;
                d.set_item("ms_per_batch_median", r.ms_per_batch_median)?;
                d.set_item("ms_iqr", r.ms_iqr)?;
                d.set_item("img_per_s", r.img_per_s)?;
                d.set_item("peak_mem_bytes", r.peak_mem_bytes)?;
                Ok(d)
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        let h = &self.inner.config.head;
        format!("Model(head={}, experts={}, k={}, params={})", h.kind.as_str(), h.experts, h.k, self.inner.num_params())
    }
}

/// Selected experts and renormalized weights for one row of logits.
#[pyfunction]
fn top_k_weights(logits: Vec<f64>, k: usize) -> PyResult<(Vec<usize>, Vec<f64>)> {
    moe_lab::moe::top_k_weights(&logits, k).map_err(py_err)
}

/// 16-hex-digit hash of a JSON document, independent of key order.
#[pyfunction]
fn config_hash(json: &str) -> PyResult<String> {
    let v: serde_json::Value = serde_json::from_str(json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    moe_lab::artifact::config_hash(&v).map_err(py_err)
}

/// Runs the command-line front end and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    moe_lab::cli::dispatch(std::iter::once("moe-lab".to_string()).chain(args))
}

#[pyfunction]
fn split_names() -> Vec<&'static str> {
    [SplitTag::Train, SplitTag::Val, SplitTag::Test].iter().map(|s| s.as_str()).collect()
}

#[pymodule]
#[pyo3(name = "moe_lab")]
fn moe_lab_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(top_k_weights, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_function(wrap_pyfunction!(split_names, m)?)?;
    Ok(())
}
