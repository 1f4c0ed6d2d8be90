use serde::{Deserialize, Serialize};

/// Benchmarking record attached to every solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub method: String,
    pub iterations: usize,
    /// Normalized total absolute marginal residual of the returned plan.
    pub final_residual: f64,
    pub cost: f64,
    pub wall_time_ms: f64,
    pub converged: bool,
    /// Set when the solve ran (or escalated to) log-sum-exp updates.
    #[serde(default)]
    pub log_domain: bool,
}
