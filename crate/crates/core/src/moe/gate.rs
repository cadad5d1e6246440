use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Added to the per-input standard deviation when standardizing top-k logits.
pub const STANDARDIZE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// Softmax over all experts; every expert is evaluated.
    Soft,
    /// Standardized, optionally noisy logits; only the top `k` are kept.
    TopK { k: usize },
}

impl GateMode {
    pub fn active(self, experts: usize) -> usize {
        match self {
            GateMode::Soft => experts,
            GateMode::TopK { k } => k,
        }
    }
}

/// Routing of one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    /// Gate logits before noise (standardized in top-k mode).
    pub clean_logits: Vec<f64>,
    /// Softplus noise scale per expert; absent when no noise was drawn.
    pub noise_std: Option<Vec<f64>>,
    pub noisy_logits: Vec<f64>,
    /// Selected experts, highest logit first.
    pub selected: Vec<usize>,
    /// Combination weights, zero outside the selection.
    pub weights: Vec<f64>,
}

impl GateDecision {
    pub fn nonzero(&self) -> usize {
        self.weights.iter().filter(|&&w| w != 0.0).count()
    }

    /// Selected experts as a sorted set, for comparisons.
    pub fn selected_set(&self) -> Vec<usize> {
        let mut s = self.selected.clone();
        s.sort_unstable();
        s
    }
}

/// Gate parameters as graph values.
#[derive(Clone, Debug)]
pub struct GateVars<S: Scalar> {
    /// `d×N`.
    pub weight: Var<S>,
    /// `N`.
    pub bias: Var<S>,
    /// `d×N`, present for top-k gates.
    pub noise_weight: Option<Var<S>>,
}

/// Batched routing output, differentiable through `clean`, `noise_std`,
/// `noisy` and `weights`. The selection itself is a constant.
#[derive(Clone, Debug)]
pub struct Routing<S: Scalar> {
    pub clean: Var<S>,
    pub noise_std: Option<Var<S>>,
    pub noisy: Var<S>,
    pub weights: Var<S>,
    pub selected: Vec<Vec<usize>>,
}

impl<S: Scalar> Routing<S> {
    pub fn experts(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn decisions(&self) -> Vec<GateDecision> {
        let n = self.experts();
        let rows = |v: &Var<S>, r: usize| v.value().row(r).iter().map(|x| x.value()).collect::<Vec<f64>>();
        (0..self.selected.len())
            .map(|r| GateDecision {
                clean_logits: rows(&self.clean, r),
                noise_std: self.noise_std.as_ref().map(|s| rows(s, r)),
                noisy_logits: rows(&self.noisy, r),
                selected: self.selected[r].clone(),
                weights: {
                    let w = rows(&self.weights, r);
                    debug_assert_eq!(w.len(), n);
                    w
                },
            })
            .collect()
    }

    /// Rows (ascending) that selected each expert.
    pub fn rows_per_expert(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.experts()];
        for (r, sel) in self.selected.iter().enumerate() {
            for &e in sel {
                out[e].push(r);
            }
        }
        out
    }
}

/// Indices of the `k` largest values, largest first; ties go to the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Per-row standardization across experts: `(z − mean) / (std + eps)` with
/// population variance.
pub fn standardize_rows<S: Scalar>(g: &mut Graph<S>, z: &Var<S>) -> Result<Var<S>> {
    let (_, n) = z.value().dims2()?;
    let mean = g.mean(z, Some(1))?;
    let mean_b = g.broadcast_cols(&mean, n)?;
    let centered = g.sub(z, &mean_b)?;
    let sq = g.square(&centered)?;
    let var = g.mean(&sq, Some(1))?;
    let std = g.sqrt(&var)?;
    let denom = g.add_scalar(&std, STANDARDIZE_EPS)?;
    let denom_b = g.broadcast_cols(&denom, n)?;
    g.div(&centered, &denom_b)
}

/// Routes a batch of features `h` (`B×d`).
///
/// `noise` supplies the training-time Gaussian perturbation for top-k gates;
/// passing `None` gives deterministic evaluation routing.
pub fn route<S: Scalar>(
    g: &mut Graph<S>,
    h: &Var<S>,
    gate: &GateVars<S>,
    mode: GateMode,
    noise: Option<&mut Rng>,
) -> Result<Routing<S>> {
    let (b, _) = h.value().dims2()?;
    let logits = g.linear(h, &gate.weight, &gate.bias)?;
    let n = logits.shape()[1];
    match mode {
        GateMode::Soft => {
            let weights = g.softmax(&logits)?;
            Ok(Routing {
                clean: logits.clone(),
                noise_std: None,
                noisy: logits,
                weights,
                selected: vec![(0..n).collect(); b],
            })
        }
        GateMode::TopK { k } => {
            if k == 0 || k > n {
                return Err(Error::config(format!("top-k gate needs 1 <= k <= {n}, got k={k}")));
            }
            let clean = standardize_rows(g, &logits)?;
            let (noisy, noise_std) = match noise {
                Some(rng) => {
                    let wn = gate
                        .noise_weight
                        .as_ref()
                        .ok_or_else(|| Error::config("noisy top-k gate has no noise weights"))?;
                    let raw = g.matmul(h, wn)?;
                    let std = g.softplus(&raw)?;
                    let eps = g.randn(&[b, n], rng);
                    let scaled = g.mul(&eps, &std)?;
                    (g.add(&clean, &scaled)?, Some(std))
                }
                None => (clean.clone(), None),
            };
            let mut mask = vec![false; b * n];
            let mut selected = Vec::with_capacity(b);
            for r in 0..b {
                let row: Vec<f64> = noisy.value().row(r).iter().map(|x| x.value()).collect();
                let top = top_k_indices(&row, k);
                for &e in &top {
                    mask[r * n + e] = true;
                }
                selected.push(top);
            }
            let weights = g.masked_softmax(&noisy, mask)?;
            Ok(Routing { clean, noise_std, noisy, weights, selected })
        }
    }
}

/// Plain-number gate for single inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub noise_weight: Option<Tensor>,
    pub mode: GateMode,
}

impl GateParams {
    pub fn soft(weight: Tensor, bias: Vec<f64>) -> Result<Self> {
        let p = GateParams { weight, bias, noise_weight: None, mode: GateMode::Soft };
        p.validate()?;
        Ok(p)
    }

    pub fn top_k(weight: Tensor, bias: Vec<f64>, noise_weight: Tensor, k: usize) -> Result<Self> {
        let p = GateParams { weight, bias, noise_weight: Some(noise_weight), mode: GateMode::TopK { k } };
        p.validate()?;
        Ok(p)
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn experts(&self) -> usize {
        self.weight.shape()[1]
    }

    fn validate(&self) -> Result<()> {
        let (_, n) = self.weight.dims2()?;
        if self.bias.len() != n {
            return Err(Error::config(format!("gate bias has {} entries for {n} experts", self.bias.len())));
        }
        if let Some(wn) = &self.noise_weight {
            if wn.shape() != self.weight.shape() {
                return Err(Error::config(format!(
                    "noise weight {:?} vs gate weight {:?}",
                    wn.shape(),
                    self.weight.shape()
                )));
            }
        }
        if let GateMode::TopK { k } = self.mode {
            if k == 0 || k > n {
                return Err(Error::config(format!("k={k} with {n} experts")));
            }
        }
        Ok(())
    }

    fn decide(&self, h: &[f64], noise: Option<&mut Rng>) -> Result<GateDecision> {
        if h.len() != self.input_dim() {
            return Err(Error::config(format!(
                "feature vector has {} entries, gate expects {}",
                h.len(),
                self.input_dim()
            )));
        }
        let mut g = Graph::<f64>::no_grad();
        let vars = GateVars {
            weight: g.constant(self.weight.clone()),
            bias: g.constant(Tensor::new(vec![self.bias.len()], self.bias.clone())?),
            noise_weight: self.noise_weight.clone().map(Var::constant),
        };
        let x = g.constant(Tensor::new(vec![1, h.len()], h.to_vec())?);
        let routing = route(&mut g, &x, &vars, self.mode, noise)?;
        Ok(routing.decisions().remove(0))
    }

    /// Softmax gate over all experts.
    pub fn gate_soft(&self, h: &[f64]) -> Result<GateDecision> {
        if self.mode != GateMode::Soft {
            return Err(Error::usage("gate_soft on a top-k gate"));
        }
        self.decide(h, None)
    }

    /// Noisy top-k gate; noise is drawn from `rng` only when `training`.
    pub fn gate_noisy_topk(&self, h: &[f64], rng: &mut Rng, training: bool) -> Result<GateDecision> {
        if self.mode == GateMode::Soft {
            return Err(Error::usage("gate_noisy_topk on a soft gate"));
        }
        self.decide(h, if training { Some(rng) } else { None })
    }
}

/// Selection and renormalized weights for one row of final logits.
pub fn top_k_weights(logits: &[f64], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let n = logits.len();
    if k == 0 || k > n {
        return Err(Error::config(format!("k={k} with {n} experts")));
    }
    let top = top_k_indices(logits, k);
    let mut mask = vec![false; n];
    for &e in &top {
        mask[e] = true;
    }
    let mut g = Graph::<f64>::no_grad();
    let x = g.constant(Tensor::new(vec![1, n], logits.to_vec())?);
    let w = g.masked_softmax(&x, mask)?;
    Ok((top, w.value().data().to_vec()))
}

/// Weighted sum of the selected experts' logits, in ascending expert order.
///
/// `outputs` pairs an expert index with that expert's logits.
pub fn combine(decision: &GateDecision, outputs: &[(usize, Vec<f64>)]) -> Result<Vec<f64>> {
    let mut order = decision.selected_set();
    order.dedup();
    let mut acc: Option<Vec<f64>> = None;
    for e in order {
        let out = &outputs
            .iter()
            .find(|(i, _)| *i == e)
            .ok_or_else(|| Error::Internal(format!("no output for selected expert {e}")))?
            .1;
        let w = decision.weights[e];
        match &mut acc {
            None => acc = Some(out.iter().map(|v| w * v).collect()),
            Some(a) => {
                if a.len() != out.len() {
                    return Err(Error::Internal(format!(
                        "expert {e} produced {} logits, expected {}",
                        out.len(),
                        a.len()
                    )));
                }
                for (x, v) in a.iter_mut().zip(out) {
                    *x += w * v;
                }
            }
        }
    }
    acc.ok_or_else(|| Error::Internal("decision selects no experts".into()))
}
