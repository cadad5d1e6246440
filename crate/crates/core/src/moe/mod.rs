//! Gating, load-balancing losses and routing statistics.

mod gate;
mod losses;
mod stats;

pub use gate::{
    combine, route, standardize_rows, top_k_indices, top_k_weights, GateDecision, GateMode, GateParams, GateVars,
    Routing, STANDARDIZE_EPS,
};
pub use losses::{
    importance_loss, kl_uniform_loss, load_loss, load_per_expert, load_vector, loss_importance, loss_kl_uniform,
    loss_load,
};
pub use stats::{routing_stats, RoutingAccumulator, RoutingStats};
