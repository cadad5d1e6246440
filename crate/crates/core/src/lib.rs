//! Mixture-of-Experts classifier heads on a small multilayer-perceptron
//! backbone, with training, routing statistics, Hessian curvature
//! diagnostics and inference benchmarks.

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifact;
pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod curvature;
pub mod data;
pub mod error;
pub mod io;
pub mod model;
pub mod moe;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
