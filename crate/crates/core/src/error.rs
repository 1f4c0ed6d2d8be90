use thiserror::Error;

use crate::policies::AdaptiveTrace;
use crate::report::SolveReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },

    #[error("instance has {variables} variables, above the exact solver cap of {cap}")]
    Capacity { variables: usize, cap: usize },

    #[error("load is not below 1 at RRH(s) {rrhs:?}")]
    InfeasibleLoad { rrhs: Vec<usize> },

    #[error("utilization {rho} is not below 1; mean job count is undefined")]
    Saturated { rho: f64 },

    #[error("sinkhorn stopped after {} iterations with residual {}", .report.iterations, .report.final_residual)]
    NotConverged { report: Box<SolveReport> },

    #[error("adaptive association found no feasible iterate in {} rounds", .0.rounds.len())]
    AdaptiveInfeasible(Box<AdaptiveTrace>),

    #[error("exact solver failed: {0}")]
    Solver(String),

    #[error("scenario parse error: {0}")]
    Parse(String),

    #[error("unsupported document version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dims(expected: impl std::fmt::Display, found: impl std::fmt::Display) -> Error {
    Error::DimensionMismatch {
        expected: expected.to_string(),
        found: found.to_string(),
    }
}
