//! Load-balancing auxiliary losses over a batch of routing weights.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::gate::top_k_indices;

const ROW_SUM_TOL: f64 = 1e-6;

fn check_rows_normalized<S: Scalar>(weights: &Var<S>) -> Result<()> {
    let (_, n) = weights.value().dims2()?;
    for (r, row) in weights.value().data().chunks(n).enumerate() {
        let s: f64 = row.iter().map(|x| x.value()).sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::numeric("loss_kl_uniform", format!("row {r} sums to {s}")));
        }
    }
    Ok(())
}

/// KL divergence of the batch-mean routing distribution from uniform.
pub fn kl_uniform_loss<S: Scalar>(g: &mut Graph<S>, weights: &Var<S>) -> Result<Var<S>> {
    check_rows_normalized(weights)?;
    let mean = g.mean(weights, Some(0))?;
    g.kl_uniform(&mean)
}

/// Squared coefficient of variation of per-expert importance (summed weights).
pub fn importance_loss<S: Scalar>(g: &mut Graph<S>, weights: &Var<S>) -> Result<Var<S>> {
    let importance = g.sum(weights, Some(0))?;
    g.cv_squared(&importance)
}

/// For every `(row, expert)` the flat index of the k-th highest noisy logit
/// among the *other* experts of that row.
fn kth_excluding_indices(noisy: &Tensor<f64>, k: usize) -> Result<Vec<usize>> {
    let (b, n) = noisy.dims2()?;
    let mut idx = Vec::with_capacity(b * n);
    for r in 0..b {
        let order = top_k_indices(noisy.row(r), k + 1);
        for i in 0..n {
            let in_top = order[..k].contains(&i);
            idx.push(r * n + order[if in_top { k } else { k - 1 }]);
        }
    }
    Ok(idx)
}

/// Smooth per-expert load: `Σₓ Φ((clean_i − kth_excluding_i(noisy)) / σ_i)`,
/// the probability that expert `i` stays in the top `k` when only its own
/// noise is redrawn. Returns a `1×N` row.
pub fn load_vector<S: Scalar>(
    g: &mut Graph<S>,
    clean: &Var<S>,
    noisy: &Var<S>,
    noise_std: &Var<S>,
    k: usize,
) -> Result<Var<S>> {
    let (b, n) = clean.value().dims2()?;
    if noisy.shape() != clean.shape() || noise_std.shape() != clean.shape() {
        return Err(Error::config(format!(
            "load: clean {:?}, noisy {:?}, std {:?}",
            clean.shape(),
            noisy.shape(),
            noise_std.shape()
        )));
    }
    if k == 0 || k > n {
        return Err(Error::config(format!("load: k={k} with {n} experts")));
    }
    if noise_std.value().data().iter().any(|s| !(s.value() > 0.0)) {
        return Err(Error::numeric("loss_load", "noise std must be positive"));
    }
    if k == n {
        // every expert is always selected
        return Ok(Var::constant(Tensor::full(&[1, n], S::from_f64(b as f64))));
    }
    let idx = kth_excluding_indices(&noisy.value().values(), k)?;
    let threshold = g.take(noisy, idx, vec![b, n])?;
    let gap = g.sub(clean, &threshold)?;
    let z = g.div(&gap, noise_std)?;
    let p = g.normal_cdf(&z)?;
    g.sum(&p, Some(0))
}

pub fn load_loss<S: Scalar>(
    g: &mut Graph<S>,
    clean: &Var<S>,
    noisy: &Var<S>,
    noise_std: &Var<S>,
    k: usize,
) -> Result<Var<S>> {
    let load = load_vector(g, clean, noisy, noise_std, k)?;
    if load.value().data().iter().all(|x| x.value() == load.value().data()[0].value()) {
        return Ok(Var::constant(Tensor::scalar(S::zero())));
    }
    g.cv_squared(&load)
}

fn eval(f: impl FnOnce(&mut Graph<f64>) -> Result<Var<f64>>) -> Result<f64> {
    let mut g = Graph::no_grad();
    Ok(f(&mut g)?.item())
}

/// `B×N` routing weights → KL(mean ‖ uniform).
pub fn loss_kl_uniform(weights: &Tensor) -> Result<f64> {
    eval(|g| kl_uniform_loss(g, &Var::constant(weights.clone())))
}

pub fn loss_importance(weights: &Tensor) -> Result<f64> {
    eval(|g| importance_loss(g, &Var::constant(weights.clone())))
}

pub fn loss_load(clean: &Tensor, noisy: &Tensor, noise_std: &Tensor, k: usize) -> Result<f64> {
    eval(|g| {
        load_loss(g, &Var::constant(clean.clone()), &Var::constant(noisy.clone()), &Var::constant(noise_std.clone()), k)
    })
}

pub fn load_per_expert(clean: &Tensor, noisy: &Tensor, noise_std: &Tensor, k: usize) -> Result<Vec<f64>> {
    let mut g = Graph::no_grad();
    let v = load_vector(
        &mut g,
        &Var::constant(clean.clone()),
        &Var::constant(noisy.clone()),
        &Var::constant(noise_std.clone()),
        k,
    )?;
    Ok(v.value().data().to_vec())
}
