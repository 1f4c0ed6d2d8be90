//! Association policies.
//!
//! * [`max_sinr_association`]: every device on its best-rate RRH.
//! * [`ot_association`]: an OT instance with `p = lambda`, a cost matrix
//!   from [`CostMode`] and an RRH marginal from [`MarginalMode`], whose plan
//!   is normalized row-wise into an association.
//! * [`adaptive_sinkhorn`]: repeatedly re-solves the inverse-rate instance
//!   while shifting RRH traffic away from the most loaded RRH.
//!
//! Sinkhorn plans are turned into associations by scaling their rows onto
//! `lambda` (one more row update), not by [`round_to_feasible`]: the
//! rank-one correction of the rounding spreads the residual mass over
//! device/RRH pairs regardless of cost, and with inverse-rate costs spanning
//! many decades even a 1e-6 residual placed on a distant RRH dominates its
//! load.
//!
//! Regularization strengths passed to the policies are expressed in units
//! of [`cost_unit`] of the instance's cost matrix, so one `epsilon` works
//! for distances in meters and for inverse rates alike. Sinkhorn is run
//! with epsilon scaling from the largest rescaled cost down to `epsilon`.
//!
//! [`round_to_feasible`]: crate::ot::round_to_feasible

use serde::Serialize;

use crate::error::{dims, Error, Result};
use crate::exact::exact_ot;
use crate::model::{completion_time_with_loads, load, Association, LoadVector, RateMatrix, Scenario};
use crate::ot::{sinkhorn_annealed, transport_cost, CostMatrix, Marginal, SinkhornConfig, TransportPlan, ANNEAL_STAGE_TOL};
use crate::report::SolveReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum CostMode {
    /// Device-to-RRH distance.
    Euclidean,
    /// Load per unit traffic, `1 / (mu R_ij)`.
    InverseRate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum MarginalMode {
    /// `q_j = sum_i lambda_i / n`.
    EqualShare,
    /// `q_j = Lambda_j`, the RRH traffic under maxSINR.
    MaxSinrTraffic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OtSolver {
    /// Entropic solve; `epsilon` is in units of [`cost_unit`].
    Sinkhorn(SinkhornConfig),
    Exact,
}

/// Highest-rate RRH per device, lowest index on ties.
pub fn max_sinr_association(scenario: &Scenario, rates: &RateMatrix) -> Result<Association> {
    let r = rates.entries();
    if r.dim() != (scenario.num_devices(), scenario.num_rrhs()) {
        return Err(dims(
            format!("{}x{}", scenario.num_devices(), scenario.num_rrhs()),
            format!("{:?}", r.dim()),
        ));
    }
    let choices: Vec<usize> = r
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    Association::from_choices(&choices, scenario.num_rrhs())
}

/// `Lambda_j = sum_i pi_ij lambda_i`.
pub fn rrh_traffic(assoc: &Association, demands: &[f64]) -> Result<Marginal> {
    if demands.len() != assoc.num_devices() {
        return Err(dims(assoc.num_devices(), demands.len()));
    }
    let mut traffic = vec![0.0; assoc.num_rrhs()];
    for ((i, j), pi) in assoc.entries().indexed_iter() {
        traffic[j] += pi * demands[i];
    }
    Marginal::new(traffic)
}

pub fn ot_cost_matrix(scenario: &Scenario, rates: &RateMatrix, mode: CostMode) -> Result<CostMatrix> {
    let (m, n) = (scenario.num_devices(), scenario.num_rrhs());
    if rates.entries().dim() != (m, n) {
        return Err(dims(format!("{m}x{n}"), format!("{:?}", rates.entries().dim())));
    }
    let entries = match mode {
        CostMode::Euclidean => ndarray::Array2::from_shape_fn((m, n), |(i, j)| {
            scenario.devices()[i].location.distance(&scenario.rrhs()[j].location)
        }),
        CostMode::InverseRate => {
            let mu = scenario.env().mu;
            rates.entries().mapv(|r| 1.0 / (mu * r))
        }
    };
    CostMatrix::new(entries)
}

/// Typical cost of serving one unit of mass: the mean over rows of the
/// cheapest entry, falling back to the mean entry and then to 1.
pub fn cost_unit(cost: &CostMatrix) -> f64 {
    let c = cost.entries();
    let row_min = c
        .outer_iter()
        .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / c.nrows() as f64;
    if row_min > 0.0 {
        row_min
    } else if cost.mean() > 0.0 {
        cost.mean()
    } else {
        1.0
    }
}

fn rrh_marginal(scenario: &Scenario, rates: &RateMatrix, mode: MarginalMode) -> Result<Marginal> {
    match mode {
        MarginalMode::EqualShare => Marginal::uniform(scenario.num_rrhs(), scenario.total_demand()),
        MarginalMode::MaxSinrTraffic => {
            rrh_traffic(&max_sinr_association(scenario, rates)?, &scenario.demands())
        }
    }
}

/// A plan from either solver whose rows match `p` exactly.
struct Solved {
    plan: TransportPlan,
    report: SolveReport,
}

fn solve_instance(cost: &CostMatrix, p: &Marginal, q: &Marginal, solver: &OtSolver) -> Result<Solved> {
    match solver {
        OtSolver::Exact => {
            let sol = exact_ot(cost, p, q)?;
            Ok(Solved {
                plan: sol.plan,
                report: sol.report,
            })
        }
        OtSolver::Sinkhorn(cfg) => {
            let unit = cost_unit(cost);
            let scaled = cost.rescaled(unit)?;
            let start = scaled.max().max(cfg.epsilon);
            let sol = sinkhorn_annealed(&scaled, p, q, cfg, start, ANNEAL_STAGE_TOL)?;
            let plan = match_rows(sol.plan, p)?;
            let mut report = sol.report;
            report.cost = transport_cost(&plan, cost)?;
            Ok(Solved { plan, report })
        }
    }
}

/// Rescales each row of `plan` to sum to `p_i`.
fn match_rows(plan: TransportPlan, p: &Marginal) -> Result<TransportPlan> {
    let mut x = plan.into_entries();
    for (mut row, target) in x.outer_iter_mut().zip(p.weights().iter()) {
        let total: f64 = row.sum();
        if *target == 0.0 {
            row.fill(0.0);
        } else if total > 0.0 && total.is_finite() {
            row.mapv_inplace(|v| v * (target / total));
        } else {
            return Err(Error::Solver(format!("plan row sums to {total}, cannot carry demand {target}")));
        }
    }
    TransportPlan::new(x)
}

#[derive(Debug, Clone)]
pub struct OtAssociation {
    pub association: Association,
    pub report: SolveReport,
}

pub fn ot_association(
    scenario: &Scenario,
    rates: &RateMatrix,
    cost_mode: CostMode,
    marginal_mode: MarginalMode,
    solver: &OtSolver,
) -> Result<OtAssociation> {
    let cost = ot_cost_matrix(scenario, rates, cost_mode)?;
    let demands = scenario.demands();
    let p = Marginal::new(demands.clone())?;
    let q = rrh_marginal(scenario, rates, marginal_mode)?;
    let solved = solve_instance(&cost, &p, &q, solver)?;
    if !solved.report.converged {
        return Err(Error::NotConverged {
            report: Box::new(solved.report),
        });
    }
    Ok(OtAssociation {
        association: Association::from_plan(solved.plan.entries(), &demands)?,
        report: solved.report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveConfig {
    /// Traffic moved off the most loaded RRH per round.
    pub delta: f64,
    /// In units of [`cost_unit`] of the inverse-rate cost matrix.
    pub epsilon: f64,
    pub max_rounds: usize,
    /// Stop once `max rho - min rho` is at most this.
    pub stop_spread: f64,
    pub residual_tol: f64,
    pub max_iters: usize,
}

impl AdaptiveConfig {
    pub const DEFAULT_DELTA_FRACTION: f64 = 0.02;

    /// Defaults with `delta` at 2% of the scenario's total demand.
    pub fn for_scenario(scenario: &Scenario) -> Self {
        Self {
            delta: Self::DEFAULT_DELTA_FRACTION * scenario.total_demand(),
            epsilon: 1.0,
            max_rounds: 200,
            stop_spread: 0.02,
            residual_tol: 1e-3,
            max_iters: 10_000,
        }
    }

    fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig::new(self.epsilon)
            .with_tol(self.residual_tol)
            .with_max_iters(self.max_iters)
    }

    pub fn validate(&self, num_rrhs: usize) -> Result<()> {
        if num_rrhs < 2 {
            return Err(Error::InvalidParameter(format!(
                "adaptive association needs at least 2 RRHs, got {num_rrhs}"
            )));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidParameter(format!("delta must be positive, got {}", self.delta)));
        }
        if !(self.stop_spread > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "stop_spread must be positive, got {}",
                self.stop_spread
            )));
        }
        if self.max_rounds == 0 {
            return Err(Error::InvalidParameter("max_rounds must be at least 1".into()));
        }
        self.sinkhorn().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    /// RRH marginal used for this round's solve.
    pub q: Vec<f64>,
    pub loads: Vec<f64>,
    pub spread: f64,
    /// `None` when some RRH is overloaded.
    pub objective: Option<f64>,
    pub sinkhorn_iterations: usize,
    pub sinkhorn_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Balanced,
    MaxRounds,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptiveTrace {
    pub rounds: Vec<RoundRecord>,
    pub stop: StopReason,
}

#[derive(Debug, Clone)]
pub struct AdaptiveOutcome {
    /// Lowest-objective feasible iterate.
    pub association: Association,
    pub loads: LoadVector,
    pub objective: f64,
    /// Index into `trace.rounds`.
    pub best_round: usize,
    pub trace: AdaptiveTrace,
    pub report: SolveReport,
}

/// Adaptive Sinkhorn association.
///
/// Starts from `q_j = sum lambda / n`. Each round solves the inverse-rate
/// instance, records the resulting loads, then takes `delta` off the RRH
/// with the highest load (clamped so `q` stays nonnegative) and spreads
/// what was removed evenly over the other RRHs.
pub fn adaptive_sinkhorn(scenario: &Scenario, rates: &RateMatrix, cfg: &AdaptiveConfig) -> Result<AdaptiveOutcome> {
    let n = scenario.num_rrhs();
    cfg.validate(n)?;
    let cost = ot_cost_matrix(scenario, rates, CostMode::InverseRate)?;
    let demands = scenario.demands();
    let p = Marginal::new(demands.clone())?;
    let mu = scenario.env().mu;

    let baseline = load(&max_sinr_association(scenario, rates)?, scenario, rates)?;
    if !baseline.is_feasible() {
        log::warn!(
            "maxSINR overloads RRH(s) {:?}; the adaptive loop may still find a feasible point",
            baseline.overloaded()
        );
    }

    let solver = OtSolver::Sinkhorn(cfg.sinkhorn());
    let mut q = vec![scenario.total_demand() / n as f64; n];
    let mut rounds = Vec::new();
    let mut best: Option<(f64, usize, Association, LoadVector, SolveReport)> = None;
    let mut stop = StopReason::MaxRounds;
    for round in 0..cfg.max_rounds {
        let qm = Marginal::new(q.clone())?;
        let solved = solve_instance(&cost, &p, &qm, &solver)?;
        let assoc = Association::from_plan(solved.plan.entries(), &demands)?;
        let loads = load(&assoc, scenario, rates)?;
        let objective = completion_time_with_loads(&assoc, &loads, mu, rates).ok();
        rounds.push(RoundRecord {
            round,
            q: q.clone(),
            loads: loads.loads.clone(),
            spread: loads.spread(),
            objective,
            sinkhorn_iterations: solved.report.iterations,
            sinkhorn_residual: solved.report.final_residual,
        });
        if let Some(obj) = objective {
            if best.as_ref().is_none_or(|b| obj < b.0) {
                best = Some((obj, round, assoc, loads.clone(), solved.report));
            }
        }
        if loads.spread() <= cfg.stop_spread {
            stop = StopReason::Balanced;
            break;
        }
        let hot = loads.argmax();
        let removed = cfg.delta.min(q[hot]);
        q[hot] -= removed;
        let share = removed / (n - 1) as f64;
        for (j, qj) in q.iter_mut().enumerate() {
            if j != hot {
                *qj += share;
            }
        }
    }
    let trace = AdaptiveTrace { rounds, stop };
    match best {
        Some((objective, best_round, association, loads, report)) => Ok(AdaptiveOutcome {
            association,
            loads,
            objective,
            best_round,
            trace,
            report,
        }),
        None => Err(Error::AdaptiveInfeasible(Box::new(trace))),
    }
}
