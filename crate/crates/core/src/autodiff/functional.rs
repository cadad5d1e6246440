use crate::error::{Error, Result};
use crate::tensor::{Dual, Scalar, Tensor};

use super::graph::{Graph, Var};

/// A scalar function of a flat parameter vector, written once against the
/// graph API so it can be evaluated over `f64` or [`Dual`] numbers.
pub trait Objective {
    fn num_params(&self) -> usize;

    fn eval<S: Scalar>(&self, g: &mut Graph<S>, params: &Var<S>) -> Result<Var<S>>;
}

fn check_len<O: Objective>(f: &O, what: &str, len: usize) -> Result<()> {
    if len != f.num_params() {
        return Err(Error::usage(format!("{what} has {len} entries, objective expects {}", f.num_params())));
    }
    Ok(())
}

pub fn loss_value<O: Objective>(f: &O, params: &[f64]) -> Result<f64> {
    check_len(f, "params", params.len())?;
    let mut g = Graph::<f64>::no_grad();
    let p = g.param(Tensor::new(vec![params.len()], params.to_vec())?);
    let loss = f.eval(&mut g, &p)?;
    if !loss.value().is_scalar() {
        return Err(Error::usage("objective returned a non-scalar"));
    }
    Ok(loss.item())
}

/// Loss and its gradient.
pub fn gradient<O: Objective>(f: &O, params: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len(f, "params", params.len())?;
    let mut g = Graph::<f64>::new();
    let p = g.param(Tensor::new(vec![params.len()], params.to_vec())?);
    let loss = f.eval(&mut g, &p)?;
    let mut grads = g.backward(&loss)?;
    let grad = grads.take(&p).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; params.len()]);
    Ok((loss.item(), grad))
}

/// Hessian-vector product `∇²f(θ)·v` by forward-over-reverse: the reverse
/// pass runs over dual numbers seeded with `v`, and the tangent part of the
/// resulting gradient is `H·v`.
pub fn hvp<O: Objective>(f: &O, params: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_len(f, "params", params.len())?;
    check_len(f, "direction", v.len())?;
    let mut g = Graph::<Dual>::new();
    let seeded = params.iter().zip(v).map(|(&p, &d)| Dual::new(p, d)).collect();
    let p = g.param(Tensor::new(vec![params.len()], seeded)?);
    let loss = f.eval(&mut g, &p)?;
    let mut grads = g.backward(&loss)?;
    let out: Vec<f64> = match grads.take(&p) {
        Some(t) => t.data().iter().map(|d| d.tan).collect(),
        None => vec![0.0; params.len()],
    };
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("hvp", "non-finite Hessian-vector product"));
    }
    Ok(out)
}
