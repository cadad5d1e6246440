#![allow(dead_code)]

use moe_lab::autodiff::{Graph, Objective, Var};
use moe_lab::data::{synth_clusters, Dataset, SplitTag, SynthConfig};
use moe_lab::model::{HeadConfig, HeadKind, LossWeights, Model, ModelConfig};
use moe_lab::rng::{streams, Rng};
use moe_lab::tensor::{Scalar, Tensor};
use moe_lab::Result;

/// Full training objective (task plus weighted balancing terms) on a fixed
/// batch. The noise stream is recreated on every call so the objective is a
/// deterministic function of the parameters.
pub struct TrainLoss<'a> {
    pub model: &'a Model,
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub noise_seed: Option<u64>,
}

impl Objective for TrainLoss<'_> {
    fn num_params(&self) -> usize {
        self.model.num_params()
    }

    fn eval<S: Scalar>(&self, g: &mut Graph<S>, params: &Var<S>) -> Result<Var<S>> {
        let x = g.constant(Tensor::from_f64(&self.x));
        let mut rng = self.noise_seed.map(|s| Rng::new(s, streams::NOISE));
        let (parts, _) = self.model.loss(g, params, &x, &self.labels, rng.as_mut())?;
        Ok(parts.total)
    }
}

pub fn blobs(classes: usize, dim: usize, n_per_class: usize, seed: u64) -> Dataset {
    synth_clusters(&SynthConfig { classes, dim, n_per_class, seed, ..Default::default() })
        .unwrap()
        .with_split(SplitTag::Train)
}

pub fn tiny_config(kind: HeadKind, input: usize, classes: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        input_dim: input,
        backbone: vec![5],
        feature_dim: 6,
        head: HeadConfig { kind, experts: 3, hidden: 3, k: if kind == HeadKind::Hard { 1 } else { 2 } },
        classes,
        loss_weights: LossWeights { kl: 0.05, importance: 0.05, load: 0.05 },
        seed,
    }
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b)).max(1e-12);
    diff / scale
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn axpy(x: &[f64], a: f64, v: &[f64]) -> Vec<f64> {
    x.iter().zip(v).map(|(p, d)| p + a * d).collect()
}

pub fn random_unit(n: usize, rng: &mut Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let s = norm(&v);
    v.into_iter().map(|x| x / s).collect()
}
