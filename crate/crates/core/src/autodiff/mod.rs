//! Reverse-mode differentiation and Hessian-vector products.

mod functional;
mod graph;

pub use functional::{gradient, hvp, loss_value, Objective};
pub use graph::{Gradients, Graph, Var};
