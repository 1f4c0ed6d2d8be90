//! Load-balancing device association for C-RAN cells.
//!
//! The crate is organized bottom-up:
//!
//! * [`ot`]: entropic optimal transport (Gibbs kernel, Sinkhorn scaling,
//!   rounding, cost/entropy/KL functionals).
//! * [`exact`]: an exact transportation solver (network simplex) used as
//!   ground truth.
//! * [`model`]: the downlink radio model and the processor-sharing load
//!   and delay model.
//! * [`policies`]: maxSINR, the OT heuristics and the adaptive Sinkhorn
//!   association loop.
//! * [`scenario`]: seeded scenario generation and the scenario file format.
//! * [`experiment`]: policy runs, benchmarks and sweeps that back the CLI.

pub mod error;
pub mod exact;
pub mod experiment;
pub mod model;
pub mod ot;
pub mod policies;
pub mod report;
pub mod scenario;

pub use error::{Error, Result};
pub use report::SolveReport;
