//! Policy runs, solver benchmarks and device-count sweeps.
//!
//! Results come out as a versioned JSON document (see
//! `schema/experiment_result.v1.schema.json` at the repository root) or as
//! CSV tables with a header row and `.` decimals.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exact::{exact_ot_with, ExactConfig};
use crate::model::{completion_time_with_loads, load, rate_matrix, Association, LoadVector, RateMatrix, Scenario};
use crate::ot::{round_to_feasible, sinkhorn, transport_cost, Marginal, SinkhornConfig};
use crate::policies::{
    adaptive_sinkhorn, cost_unit, max_sinr_association, ot_association, ot_cost_matrix, AdaptiveConfig,
    AdaptiveTrace, CostMode, MarginalMode, OtSolver,
};
use crate::report::SolveReport;
use crate::scenario::{generate, scenario_digest, GeneratorSpec};

pub const RESULT_SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicySpec {
    MaxSinr,
    Ot { cost: CostMode, marginal: MarginalMode },
    Adaptive,
}

impl PolicySpec {
    /// The four uniform-traffic policies: maxSINR, Euclidean/equal,
    /// inverse-rate/equal, inverse-rate/maxSINR traffic.
    pub const SWEEP: [PolicySpec; 4] = [
        PolicySpec::MaxSinr,
        PolicySpec::Ot {
            cost: CostMode::Euclidean,
            marginal: MarginalMode::EqualShare,
        },
        PolicySpec::Ot {
            cost: CostMode::InverseRate,
            marginal: MarginalMode::EqualShare,
        },
        PolicySpec::Ot {
            cost: CostMode::InverseRate,
            marginal: MarginalMode::MaxSinrTraffic,
        },
    ];
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::MaxSinr => write!(f, "maxsinr"),
            PolicySpec::Adaptive => write!(f, "adaptive"),
            PolicySpec::Ot { cost, marginal } => {
                let c = match cost {
                    CostMode::Euclidean => "euclid",
                    CostMode::InverseRate => "invrate",
                };
                let m = match marginal {
                    MarginalMode::EqualShare => "equal",
                    MarginalMode::MaxSinrTraffic => "maxsinr",
                };
                write!(f, "ot:{c}:{m}")
            }
        }
    }
}

impl FromStr for PolicySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = || {
            Error::InvalidParameter(format!(
                "unknown policy `{s}` (expected maxsinr, adaptive or ot:{{euclid,invrate}}:{{equal,maxsinr}})"
            ))
        };
        match parts.as_slice() {
            ["maxsinr"] => Ok(PolicySpec::MaxSinr),
            ["adaptive"] => Ok(PolicySpec::Adaptive),
            ["ot", c, m] => {
                let cost = match *c {
                    "euclid" => CostMode::Euclidean,
                    "invrate" => CostMode::InverseRate,
                    _ => return Err(bad()),
                };
                let marginal = match *m {
                    "equal" => MarginalMode::EqualShare,
                    "maxsinr" => MarginalMode::MaxSinrTraffic,
                    _ => return Err(bad()),
                };
                Ok(PolicySpec::Ot { cost, marginal })
            }
            _ => Err(bad()),
        }
    }
}

/// Solver settings shared by every policy in a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunOptions {
    /// Regularization of the fixed-marginal OT policies, in units of the
    /// instance's cost unit.
    pub epsilon: f64,
    /// Regularization of the adaptive loop, same units.
    pub adaptive_epsilon: f64,
    pub tol: f64,
    pub max_iters: usize,
    /// Adaptive step; `None` means 2% of total demand.
    pub delta: Option<f64>,
    pub max_rounds: usize,
    pub stop_spread: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_POLICY_EPSILON,
            adaptive_epsilon: DEFAULT_ADAPTIVE_EPSILON,
            tol: 1e-3,
            max_iters: 10_000,
            delta: None,
            max_rounds: 200,
            stop_spread: 0.02,
        }
    }
}

pub const DEFAULT_POLICY_EPSILON: f64 = 0.03;
/// Larger than [`DEFAULT_POLICY_EPSILON`] so that loads respond smoothly to
/// the shifted RRH marginal.
pub const DEFAULT_ADAPTIVE_EPSILON: f64 = 1.0;

impl RunOptions {
    fn solver(&self) -> OtSolver {
        OtSolver::Sinkhorn(
            SinkhornConfig::new(self.epsilon)
                .with_tol(self.tol)
                .with_max_iters(self.max_iters),
        )
    }

    fn adaptive(&self, scenario: &Scenario) -> AdaptiveConfig {
        let mut cfg = AdaptiveConfig::for_scenario(scenario);
        if let Some(delta) = self.delta {
            cfg.delta = delta;
        }
        cfg.epsilon = self.adaptive_epsilon;
        cfg.residual_tol = self.tol;
        cfg.max_iters = self.max_iters;
        cfg.max_rounds = self.max_rounds;
        cfg.stop_spread = self.stop_spread;
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyStatus {
    Ok,
    Infeasible,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssociationSummary {
    /// Devices whose largest share is on each RRH.
    pub devices_per_rrh: Vec<usize>,
    /// Devices split over more than one RRH.
    pub fractional_devices: usize,
    pub positive_entries: usize,
}

impl AssociationSummary {
    fn of(assoc: &Association) -> Self {
        let mut devices_per_rrh = vec![0; assoc.num_rrhs()];
        let mut fractional = 0;
        for row in assoc.entries().outer_iter() {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            devices_per_rrh[best] += 1;
            if row[best] < 1.0 - 1e-6 {
                fractional += 1;
            }
        }
        Self {
            devices_per_rrh,
            fractional_devices: fractional,
            positive_entries: assoc.entries().iter().filter(|x| **x > 0.0).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ratios {
    /// `None` unless both this policy and the baseline are feasible.
    pub completion_time: Option<f64>,
    pub total_load: f64,
    pub max_load: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyResult {
    pub policy: String,
    pub status: PolicyStatus,
    pub error: Option<String>,
    pub loads: Option<Vec<f64>>,
    pub total_load: Option<f64>,
    pub max_load: Option<f64>,
    pub load_spread: Option<f64>,
    pub overloaded_rrhs: Vec<usize>,
    /// Mean completion time per device, seconds.
    pub objective: Option<f64>,
    pub association: Option<AssociationSummary>,
    pub report: Option<SolveReport>,
    pub ratios: Option<Ratios>,
    pub trace: Option<AdaptiveTrace>,
}

impl PolicyResult {
    fn failed(policy: &PolicySpec, err: &Error, trace: Option<AdaptiveTrace>) -> Self {
        let status = match err {
            Error::AdaptiveInfeasible(_) | Error::InfeasibleLoad { .. } => PolicyStatus::Infeasible,
            _ => PolicyStatus::Error,
        };
        Self {
            policy: policy.to_string(),
            status,
            error: Some(err.to_string()),
            loads: None,
            total_load: None,
            max_load: None,
            load_spread: None,
            overloaded_rrhs: Vec::new(),
            objective: None,
            association: None,
            report: match err {
                Error::NotConverged { report } => Some((**report).clone()),
                _ => None,
            },
            ratios: None,
            trace,
        }
    }

    fn evaluated(
        policy: &PolicySpec,
        assoc: &Association,
        loads: &LoadVector,
        objective: Option<f64>,
        report: Option<SolveReport>,
        trace: Option<AdaptiveTrace>,
    ) -> Self {
        Self {
            policy: policy.to_string(),
            status: if loads.is_feasible() { PolicyStatus::Ok } else { PolicyStatus::Infeasible },
            error: None,
            loads: Some(loads.loads.clone()),
            total_load: Some(loads.total()),
            max_load: Some(loads.max()),
            load_spread: Some(loads.spread()),
            overloaded_rrhs: loads.overloaded(),
            objective,
            association: Some(AssociationSummary::of(assoc)),
            report,
            ratios: None,
            trace,
        }
    }

    fn with_ratios(mut self, baseline: &PolicyResult) -> Self {
        if let (Some(total), Some(max), Some(base_total), Some(base_max)) =
            (self.total_load, self.max_load, baseline.total_load, baseline.max_load)
        {
            let completion_time = match (self.objective, baseline.objective) {
                (Some(a), Some(b)) => Some(a / b),
                _ => None,
            };
            self.ratios = Some(Ratios {
                completion_time,
                total_load: total / base_total,
                max_load: max / base_max,
            });
        }
        self
    }
}

/// One evaluated policy before it is turned into a record.
pub struct PolicyEvaluation {
    pub association: Association,
    pub loads: LoadVector,
    pub objective: Option<f64>,
    pub report: Option<SolveReport>,
    pub trace: Option<AdaptiveTrace>,
}

pub fn evaluate_policy(
    policy: &PolicySpec,
    scenario: &Scenario,
    rates: &RateMatrix,
    opts: &RunOptions,
) -> Result<PolicyEvaluation> {
    let mu = scenario.env().mu;
    let (association, report, trace) = match policy {
        PolicySpec::MaxSinr => (max_sinr_association(scenario, rates)?, None, None),
        PolicySpec::Ot { cost, marginal } => {
            let out = ot_association(scenario, rates, *cost, *marginal, &opts.solver())?;
            (out.association, Some(out.report), None)
        }
        PolicySpec::Adaptive => {
            let out = adaptive_sinkhorn(scenario, rates, &opts.adaptive(scenario))?;
            (out.association, Some(out.report), Some(out.trace))
        }
    };
    let loads = load(&association, scenario, rates)?;
    let objective = completion_time_with_loads(&association, &loads, mu, rates).ok();
    Ok(PolicyEvaluation {
        association,
        loads,
        objective,
        report,
        trace,
    })
}

fn policy_record(policy: &PolicySpec, scenario: &Scenario, rates: &RateMatrix, opts: &RunOptions) -> PolicyResult {
    match evaluate_policy(policy, scenario, rates, opts) {
        Ok(ev) => PolicyResult::evaluated(policy, &ev.association, &ev.loads, ev.objective, ev.report, ev.trace),
        Err(Error::AdaptiveInfeasible(trace)) => {
            let err = Error::AdaptiveInfeasible(trace.clone());
            PolicyResult::failed(policy, &err, Some(*trace))
        }
        Err(err) => PolicyResult::failed(policy, &err, None),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub schema_version: u64,
    pub scenario_digest: String,
    pub devices: usize,
    pub rrhs: usize,
    pub settings: RunOptions,
    pub baseline: PolicyResult,
    pub policies: Vec<PolicyResult>,
}

impl ExperimentResult {
    /// No selected policy produced a feasible association.
    pub fn infeasible_only(&self) -> bool {
        self.policies.iter().all(|p| p.status != PolicyStatus::Ok)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("result serializes");
        s.push('\n');
        s
    }
}

/// Evaluates each policy; ratios are against maxSINR, which is always run.
pub fn run_policies(scenario: &Scenario, policies: &[PolicySpec], opts: &RunOptions) -> Result<ExperimentResult> {
    if policies.is_empty() {
        return Err(Error::InvalidParameter("select at least one policy".into()));
    }
    let rates = rate_matrix(scenario);
    let baseline = policy_record(&PolicySpec::MaxSinr, scenario, &rates, opts);
    let records = policies
        .par_iter()
        .map(|p| policy_record(p, scenario, &rates, opts).with_ratios(&baseline))
        .collect();
    Ok(ExperimentResult {
        schema_version: RESULT_SCHEMA_VERSION,
        scenario_digest: scenario_digest(scenario),
        devices: scenario.num_devices(),
        rrhs: scenario.num_rrhs(),
        settings: *opts,
        baseline: baseline.clone().with_ratios(&baseline),
        policies: records,
    })
}

/// Removes every `wall_time_ms` member, for comparing result documents.
pub fn strip_wall_times(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.remove("wall_time_ms");
            for v in map.values_mut() {
                strip_wall_times(v);
            }
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_wall_times),
        _ => {}
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub sizes: Vec<usize>,
    pub rrhs: usize,
    pub tolerances: Vec<f64>,
    pub seed: u64,
    /// Fixed regularization in cost units; `None` scales it with each
    /// tolerance by [`BENCH_EPSILON_PER_TOL`].
    pub epsilon: Option<f64>,
    pub runs: usize,
    /// Largest `m * n` handed to the exact solver.
    pub exact_cap: usize,
    pub area_side: f64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            sizes: vec![10, 50, 100, 500, 1000, 5000],
            rrhs: 25,
            tolerances: vec![1e-2, 1e-3],
            seed: 1,
            epsilon: None,
            runs: 7,
            exact_cap: 500 * 25,
            area_side: 1000.0,
        }
    }
}

/// The entropic bias of the plan grows with epsilon, so epsilon shrinks
/// with the tolerance to keep the rounded cost within `1 + 5 tol` of the
/// optimum.
pub const BENCH_EPSILON_PER_TOL: f64 = 15.0;

impl BenchSpec {
    pub fn epsilon_for(&self, tol: f64) -> f64 {
        self.epsilon.unwrap_or(BENCH_EPSILON_PER_TOL * tol)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub median_ms: f64,
    pub mean_ms: f64,
}

impl Timing {
    fn of(mut samples: Vec<f64>) -> Self {
        samples.sort_by(f64::total_cmp);
        let k = samples.len();
        let median_ms = if k % 2 == 1 {
            samples[k / 2]
        } else {
            0.5 * (samples[k / 2 - 1] + samples[k / 2])
        };
        Self {
            median_ms,
            mean_ms: samples.iter().sum::<f64>() / k as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SinkhornBench {
    pub tol: f64,
    pub timing: Timing,
    pub iterations: usize,
    pub converged: bool,
    /// Cost of the rounded plan over the exact optimum.
    pub cost_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub devices: usize,
    pub rrhs: usize,
    /// `None` when the instance exceeds the exact cap.
    pub exact: Option<Timing>,
    pub exact_cost: Option<f64>,
    pub sinkhorn: Vec<SinkhornBench>,
}

/// The benchmark instance: a seeded uniform scenario with Euclidean cost,
/// `p = lambda` and equal RRH shares.
pub fn bench_instance(devices: usize, spec: &BenchSpec) -> Result<(crate::ot::CostMatrix, Marginal, Marginal)> {
    let scenario = generate(
        &GeneratorSpec::uniform(devices, spec.rrhs, spec.area_side, spec.seed).with_demand_range(0.5, 1.5),
    )?;
    let rates = rate_matrix(&scenario);
    let cost = ot_cost_matrix(&scenario, &rates, CostMode::Euclidean)?;
    let cost = cost.rescaled(cost_unit(&cost))?;
    let p = Marginal::new(scenario.demands())?;
    let q = Marginal::uniform(spec.rrhs, p.mass())?;
    Ok((cost, p, q))
}

/// Times the exact solver and Sinkhorn (each sample includes rounding) on
/// every size, sequentially. Runs are interleaved, one sample of every
/// solver per round, so both see the same machine conditions.
pub fn bench(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    if spec.sizes.is_empty() || spec.tolerances.is_empty() || spec.runs == 0 {
        return Err(Error::InvalidParameter("bench needs sizes, tolerances and at least one run".into()));
    }
    let exact_cfg = ExactConfig {
        max_variables: spec.exact_cap,
    };
    let configs: Vec<SinkhornConfig> = spec
        .tolerances
        .iter()
        .map(|&tol| SinkhornConfig::new(spec.epsilon_for(tol)).with_tol(tol))
        .collect();
    let mut rows = Vec::with_capacity(spec.sizes.len());
    for &m in &spec.sizes {
        let (cost, p, q) = bench_instance(m, spec)?;
        let run_exact = m * spec.rrhs <= spec.exact_cap;
        let mut exact_samples = Vec::with_capacity(spec.runs);
        let mut exact_cost = None;
        let mut samples = vec![Vec::with_capacity(spec.runs); configs.len()];
        let mut last = Vec::with_capacity(configs.len());
        for _ in 0..spec.runs {
            if run_exact {
                let t = Instant::now();
                let sol = exact_ot_with(&cost, &p, &q, &exact_cfg)?;
                exact_samples.push(t.elapsed().as_secs_f64() * 1e3);
                exact_cost = Some(sol.optimal_cost);
            }
            last.clear();
            for (cfg, times) in configs.iter().zip(samples.iter_mut()) {
                let t = Instant::now();
                let sol = sinkhorn(&cost, &p, &q, cfg)?;
                let plan = round_to_feasible(&sol.plan, &p, &q)?;
                times.push(t.elapsed().as_secs_f64() * 1e3);
                last.push((sol.report, plan));
            }
        }
        let mut sinkhorn_rows = Vec::with_capacity(configs.len());
        for ((cfg, times), (report, plan)) in configs.iter().zip(samples).zip(last.drain(..)) {
            let cost_ratio = match exact_cost {
                Some(opt) if opt > 0.0 => Some(transport_cost(&plan, &cost)? / opt),
                _ => None,
            };
            sinkhorn_rows.push(SinkhornBench {
                tol: cfg.residual_tol,
                timing: Timing::of(times),
                iterations: report.iterations,
                converged: report.converged,
                cost_ratio,
            });
        }
        rows.push(BenchRow {
            devices: m,
            rrhs: spec.rrhs,
            exact: run_exact.then(|| Timing::of(exact_samples)),
            exact_cost,
            sinkhorn: sinkhorn_rows,
        });
    }
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "skipped".to_string(), |x| format!("{x:.6}"))
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let tols: Vec<f64> = rows.first().map(|r| r.sinkhorn.iter().map(|s| s.tol).collect()).unwrap_or_default();
    let mut header = vec!["devices".to_string(), "rrhs".to_string(), "exact_ms".to_string()];
    header.extend(tols.iter().map(|t| format!("sinkhorn_ms_tau_{t}")));
    header.extend(tols.iter().map(|t| format!("sinkhorn_iters_tau_{t}")));
    header.extend(tols.iter().map(|t| format!("cost_ratio_tau_{t}")));
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        let mut rec = vec![
            row.devices.to_string(),
            row.rrhs.to_string(),
            fmt_opt(row.exact.as_ref().map(|t| t.median_ms)),
        ];
        rec.extend(row.sinkhorn.iter().map(|s| format!("{:.6}", s.timing.median_ms)));
        rec.extend(row.sinkhorn.iter().map(|s| s.iterations.to_string()));
        rec.extend(row.sinkhorn.iter().map(|s| fmt_opt(s.cost_ratio)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub device_counts: Vec<usize>,
    pub rrhs: usize,
    pub seed: u64,
    pub area_side: f64,
    /// Demands are scaled so the mean maxSINR load equals this.
    pub utilization: f64,
    pub options: RunOptions,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            device_counts: vec![100, 200, 500, 1000, 2000, 5000],
            rrhs: 25,
            seed: 1,
            area_side: 1000.0,
            utilization: DEFAULT_SWEEP_UTILIZATION,
            options: RunOptions::default(),
        }
    }
}

/// Mean maxSINR load of sweep scenarios. Equal-share marginals force
/// traffic onto far RRHs at low device counts, so the sweep runs lightly
/// loaded to keep every policy feasible at 100 devices.
pub const DEFAULT_SWEEP_UTILIZATION: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepEntry {
    pub policy: String,
    /// Completion-time ratio to maxSINR.
    pub ratio: Option<f64>,
    pub status: PolicyStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub devices: usize,
    pub rrhs: usize,
    pub baseline_ms: Option<f64>,
    pub entries: Vec<SweepEntry>,
}

impl SweepRow {
    pub fn ratio(&self, policy: &PolicySpec) -> Option<f64> {
        let name = policy.to_string();
        self.entries.iter().find(|e| e.policy == name).and_then(|e| e.ratio)
    }
}

/// The uniform scenario used at one sweep point.
pub fn sweep_scenario(devices: usize, spec: &SweepSpec) -> Result<Scenario> {
    let raw = generate(
        &GeneratorSpec::uniform(devices, spec.rrhs, spec.area_side, spec.seed).with_demand_range(0.5, 1.5),
    )?;
    let rates = rate_matrix(&raw);
    let loads = load(&max_sinr_association(&raw, &rates)?, &raw, &rates)?;
    let mean = loads.total() / spec.rrhs as f64;
    raw.with_scaled_demands(spec.utilization / mean)
}

fn sweep_point(devices: usize, spec: &SweepSpec) -> Result<SweepRow> {
    let scenario = sweep_scenario(devices, spec)?;
    let rates = rate_matrix(&scenario);
    let records: Vec<PolicyResult> = PolicySpec::SWEEP
        .iter()
        .map(|p| policy_record(p, &scenario, &rates, &spec.options))
        .collect();
    let baseline = records[0].clone();
    let entries = records
        .into_iter()
        .skip(1)
        .map(|r| {
            let r = r.with_ratios(&baseline);
            SweepEntry {
                policy: r.policy,
                ratio: r.ratios.and_then(|x| x.completion_time),
                status: r.status,
            }
        })
        .collect();
    Ok(SweepRow {
        devices,
        rrhs: spec.rrhs,
        baseline_ms: baseline.objective.map(|t| t * 1e3),
        entries,
    })
}

/// Sweep points run in parallel; rows come back in input order.
pub fn sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    if spec.device_counts.is_empty() {
        return Err(Error::InvalidParameter("sweep needs at least one device count".into()));
    }
    spec.device_counts.par_iter().map(|&m| sweep_point(m, spec)).collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["devices".to_string(), "rrhs".to_string(), "maxsinr_ms".to_string()];
    if let Some(row) = rows.first() {
        header.extend(row.entries.iter().map(|e| format!("ratio_{}", e.policy)));
    }
    header.push("infeasible".to_string());
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        let mut rec = vec![
            row.devices.to_string(),
            row.rrhs.to_string(),
            row.baseline_ms.map_or_else(|| "infeasible".into(), |t| format!("{t:.6}")),
        ];
        rec.extend(row.entries.iter().map(|e| e.ratio.map_or_else(|| "nan".into(), |r| format!("{r:.6}"))));
        let bad: Vec<&str> = row
            .entries
            .iter()
            .filter(|e| e.status != PolicyStatus::Ok)
            .map(|e| e.policy.as_str())
            .collect();
        rec.push(bad.join(" "));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
