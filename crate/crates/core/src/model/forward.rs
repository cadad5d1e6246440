use crate::autodiff::{Graph, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::moe::{importance_loss, kl_uniform_loss, load_loss, route, GateDecision, GateMode, GateVars, Routing};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

use super::{HeadKind, Model};

/// Output of one forward pass.
pub struct Forward<S: Scalar> {
    pub features: Var<S>,
    pub logits: Var<S>,
    pub routing: Option<Routing<S>>,
}

/// Task cross-entropy, weighted auxiliary balancing terms, and their sum.
pub struct LossParts<S: Scalar> {
    pub total: Var<S>,
    pub task: Var<S>,
    pub aux: Option<Var<S>>,
}

/// Plain-number eval output.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Tensor,
    pub decisions: Option<Vec<GateDecision>>,
}

impl Model {
    /// The flat parameter vector registered as a graph leaf.
    pub fn theta<S: Scalar>(&self, g: &mut Graph<S>) -> Result<Var<S>> {
        Ok(g.param(Tensor::new(vec![self.num_params()], self.params.values.iter().map(|&v| S::from_f64(v)).collect())?))
    }

    fn view<S: Scalar>(&self, g: &mut Graph<S>, theta: &Var<S>, name: &str) -> Result<Var<S>> {
        let slot = self.params.slot(name)?;
        g.slice(theta, slot.offset, slot.shape.clone())
    }

    fn dense<S: Scalar>(&self, g: &mut Graph<S>, theta: &Var<S>, x: &Var<S>, prefix: &str) -> Result<Var<S>> {
        let w = self.view(g, theta, &format!("{prefix}.weight"))?;
        let b = self.view(g, theta, &format!("{prefix}.bias"))?;
        g.linear(x, &w, &b)
    }

    /// Two-layer perceptron `fc2(relu(fc1(x)))`.
    fn mlp<S: Scalar>(&self, g: &mut Graph<S>, theta: &Var<S>, x: &Var<S>, prefix: &str) -> Result<Var<S>> {
        let hidden = self.dense(g, theta, x, &format!("{prefix}.fc1"))?;
        let hidden = g.relu(&hidden)?;
        self.dense(g, theta, &hidden, &format!("{prefix}.fc2"))
    }

    pub fn features<S: Scalar>(&self, g: &mut Graph<S>, theta: &Var<S>, x: &Var<S>) -> Result<Var<S>> {
        let mut h = x.clone();
        for l in 0..self.config.backbone_layers().len() {
            h = self.dense(g, theta, &h, &format!("backbone.{l}"))?;
            h = g.relu(&h)?;
        }
        Ok(h)
    }

    /// Maps a `B×D` batch to `B×C` logits.
    ///
    /// `noise` drives the training-time gate perturbation of top-k heads; with
    /// `None` routing is deterministic. Soft and dense heads never draw noise.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        theta: &Var<S>,
        x: &Var<S>,
        noise: Option<&mut Rng>,
    ) -> Result<Forward<S>> {
        if theta.value().len() != self.num_params() {
            return Err(Error::usage(format!(
                "parameter vector has {} entries, model has {}",
                theta.value().len(),
                self.num_params()
            )));
        }
        let (b, d) = x.value().dims2()?;
        if d != self.config.input_dim {
            return Err(Error::config(format!("input has {d} features, model expects {}", self.config.input_dim)));
        }
        if b == 0 {
            return Err(Error::usage("empty batch"));
        }
        let features = self.features(g, theta, x)?;
        let Some(mode) = self.config.gate_mode() else {
            let logits = self.mlp(g, theta, &features, "head")?;
            return Ok(Forward { features, logits, routing: None });
        };
        let gate = GateVars {
            weight: self.view(g, theta, "gate.weight")?,
            bias: self.view(g, theta, "gate.bias")?,
            noise_weight: match mode {
                GateMode::TopK { .. } if noise.is_some() => Some(self.view(g, theta, "gate.noise_weight")?),
                _ => None,
            },
        };
        let noise = if matches!(mode, GateMode::TopK { .. }) { noise } else { None };
        let routing = route(g, &features, &gate, mode, noise)?;
        let classes = self.config.classes;
        let mut acc: Option<Var<S>> = None;
        match mode {
            GateMode::Soft => {
                for e in 0..self.config.head.experts {
                    let out = self.mlp(g, theta, &features, &format!("expert.{e}"))?;
                    let w = g.column(&routing.weights, e)?;
                    let w = g.broadcast_cols(&w, classes)?;
                    let term = g.mul(&out, &w)?;
                    acc = Some(match acc {
                        None => term,
                        Some(a) => g.add(&a, &term)?,
                    });
                }
            }
            GateMode::TopK { .. } => {
                // only rows that selected expert e ever reach it
                for (e, rows) in routing.rows_per_expert().into_iter().enumerate() {
                    if rows.is_empty() {
                        continue;
                    }
                    let xe = g.gather_rows(&features, &rows)?;
                    let out = self.mlp(g, theta, &xe, &format!("expert.{e}"))?;
                    let w = g.column(&routing.weights, e)?;
                    let w = g.gather_rows(&w, &rows)?;
                    let w = g.broadcast_cols(&w, classes)?;
                    let weighted = g.mul(&out, &w)?;
                    let term = g.scatter_add_rows(&weighted, &rows, b)?;
                    acc = Some(match acc {
                        None => term,
                        Some(a) => g.add(&a, &term)?,
                    });
                }
            }
        }
        let logits = acc.ok_or_else(|| Error::Internal("no expert produced output".into()))?;
        Ok(Forward { features, logits, routing: Some(routing) })
    }

    /// Task loss plus weighted balancing terms for the head kind.
    pub fn loss<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        theta: &Var<S>,
        x: &Var<S>,
        labels: &[usize],
        noise: Option<&mut Rng>,
    ) -> Result<(LossParts<S>, Forward<S>)> {
        let fwd = self.forward(g, theta, x, noise)?;
        let task = g.cross_entropy(&fwd.logits, labels)?;
        let lw = &self.config.loss_weights;
        let mut terms = Vec::new();
        if let Some(r) = &fwd.routing {
            match self.config.head.kind {
                HeadKind::Soft if lw.kl > 0.0 => terms.push((lw.kl, kl_uniform_loss(g, &r.weights)?)),
                HeadKind::Sparse | HeadKind::Hard => {
                    if lw.importance > 0.0 {
                        terms.push((lw.importance, importance_loss(g, &r.weights)?));
                    }
                    if let (true, Some(std)) = (lw.load > 0.0, &r.noise_std) {
                        terms.push((lw.load, load_loss(g, &r.clean, &r.noisy, std, self.config.head.k)?));
                    }
                }
                _ => {}
            }
        }
        let mut aux: Option<Var<S>> = None;
        for (w, t) in terms {
            let t = g.scale(&t, w)?;
            aux = Some(match aux {
                None => t,
                Some(a) => g.add(&a, &t)?,
            });
        }
        let total = match &aux {
            Some(a) => g.add(&task, a)?,
            None => task.clone(),
        };
        Ok((LossParts { total, task, aux }, fwd))
    }

    /// Eval-mode forward at the model's own parameters.
    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        self.predict_with(&self.params.values, x)
    }

    /// Eval-mode forward at an arbitrary parameter vector of the same layout.
    pub fn predict_with(&self, values: &[f64], x: &Tensor) -> Result<Prediction> {
        let mut g = Graph::<f64>::no_grad();
        let theta = g.param(Tensor::new(vec![values.len()], values.to_vec())?);
        let x = g.constant(x.clone());
        let fwd = self.forward(&mut g, &theta, &x, None)?;
        Ok(Prediction { logits: (*fwd.logits.value()).clone(), decisions: fwd.routing.map(|r| r.decisions()) })
    }

    /// Mean task cross-entropy over `ds` in eval mode, accumulated per chunk.
    pub fn eval_loss_with(&self, values: &[f64], ds: &Dataset, chunk: usize) -> Result<f64> {
        let mut total = 0.0;
        for (x, labels) in chunks(ds, chunk) {
            let mut g = Graph::<f64>::no_grad();
            let theta = g.param(Tensor::new(vec![values.len()], values.to_vec())?);
            let x = g.constant(x);
            let fwd = self.forward(&mut g, &theta, &x, None)?;
            total += g.cross_entropy(&fwd.logits, &labels)?.item() * labels.len() as f64;
        }
        Ok(total / ds.len() as f64)
    }

    /// Eval-mode accuracy and routing decisions over a dataset.
    pub fn evaluate(&self, ds: &Dataset, chunk: usize) -> Result<(f64, Option<Vec<GateDecision>>)> {
        let mut correct = 0usize;
        let mut decisions: Option<Vec<GateDecision>> = self.head_kind().is_moe().then(Vec::new);
        for (x, labels) in chunks(ds, chunk) {
            let p = self.predict(&x)?;
            correct += argmax_rows(&p.logits).iter().zip(&labels).filter(|(a, b)| a == b).count();
            if let (Some(all), Some(d)) = (&mut decisions, p.decisions) {
                all.extend(d);
            }
        }
        Ok((correct as f64 / ds.len() as f64, decisions))
    }
}

/// Consecutive in-order batches of at most `chunk` rows.
pub(crate) fn chunks(ds: &Dataset, chunk: usize) -> impl Iterator<Item = (Tensor, Vec<usize>)> + '_ {
    let chunk = chunk.max(1);
    (0..ds.len()).step_by(chunk).map(move |start| {
        let idx: Vec<usize> = (start..(start + chunk).min(ds.len())).collect();
        let b = ds.batch(&idx);
        (b.x, b.labels)
    })
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
