//! Entropic-regularized discrete optimal transport.
//!
//! The solver alternates the two scaling updates
//! `a_i = p_i / sum_j xi_ij b_j` and `b_j = q_j / sum_i xi_ij a_i` starting
//! from `b = 1`, and returns the plan `x_ij = xi_ij a_i b_j`. When the Gibbs
//! kernel `xi = exp(-C / epsilon)` would underflow, the same updates run on
//! log-potentials with log-sum-exp reductions.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{dims, Error, Result};
use crate::report::SolveReport;

/// Below `LOG_DOMAIN_RATIO * max(C)` the solver starts in log domain.
pub const LOG_DOMAIN_RATIO: f64 = 0.02;
/// Scaling denominators below this trigger escalation to log domain.
pub const UNDERFLOW_FLOOR: f64 = 1e-300;
/// Relative mass mismatch silently absorbed by rescaling `q`.
pub const MASS_TOLERANCE: f64 = 1e-9;
/// Default residual target for the intermediate stages of [`sinkhorn_annealed`].
pub const ANNEAL_STAGE_TOL: f64 = 1e-3;

/// Nonnegative mass vector with positive total.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginal(Array1<f64>);

impl Marginal {
    pub fn new(weights: impl Into<Array1<f64>>) -> Result<Self> {
        let weights = weights.into();
        if weights.is_empty() {
            return Err(Error::InvalidInput("marginal is empty".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidInput(format!(
                "marginal entries must be finite and nonnegative, found {w}"
            )));
        }
        if weights.sum() <= 0.0 {
            return Err(Error::InvalidInput("marginal has zero total mass".into()));
        }
        Ok(Self(weights))
    }

    /// `len` equal entries summing to `mass`.
    pub fn uniform(len: usize, mass: f64) -> Result<Self> {
        Self::new(Array1::from_elem(len, mass / len as f64))
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mass(&self) -> f64 {
        self.0.sum()
    }

    fn scaled(&self, factor: f64) -> Self {
        Self(&self.0 * factor)
    }
}

/// Finite nonnegative `m x n` cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Array2<f64>);

impl CostMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("cost matrix is empty".into()));
        }
        if let Some(c) = entries.iter().find(|c| !c.is_finite() || **c < 0.0) {
            return Err(Error::InvalidInput(format!(
                "cost entries must be finite and nonnegative, found {c}"
            )));
        }
        Ok(Self(entries))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidInput("ragged cost rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let entries = Array2::from_shape_vec((rows.len(), n), flat)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        Self::new(entries)
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.0.mean().unwrap_or(0.0)
    }

    /// Same matrix divided by a positive `unit`.
    pub fn rescaled(&self, unit: f64) -> Result<Self> {
        if !(unit > 0.0 && unit.is_finite()) {
            return Err(Error::InvalidParameter(format!("cost unit must be positive, got {unit}")));
        }
        Ok(Self(&self.0 / unit))
    }

    fn check_shape(&self, m: usize, n: usize) -> Result<()> {
        if self.0.dim() != (m, n) {
            return Err(dims(format!("{m}x{n}"), format!("{}x{}", self.nrows(), self.ncols())));
        }
        Ok(())
    }
}

/// `xi_ij = exp(-C_ij / epsilon)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsKernel {
    entries: Array2<f64>,
    epsilon: f64,
}

impl GibbsKernel {
    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

pub fn gibbs_kernel(cost: &CostMatrix, epsilon: f64) -> Result<GibbsKernel> {
    check_epsilon(epsilon)?;
    Ok(GibbsKernel {
        entries: cost.0.mapv(|c| (-c / epsilon).exp()),
        epsilon,
    })
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(())
}

/// Nonnegative coupling matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan(Array2<f64>);

impl TransportPlan {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if let Some(x) = entries.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(Error::InvalidInput(format!(
                "plan entries must be finite and nonnegative, found {x}"
            )));
        }
        Ok(Self(entries))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let entries = Array2::from_shape_vec((rows.len(), n), flat)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        Self::new(entries)
    }

    pub fn zeros(m: usize, n: usize) -> Self {
        Self(Array2::zeros((m, n)))
    }

    /// Outer product `p q^T / mass(q)`.
    pub fn product(p: &Marginal, q: &Marginal) -> Self {
        let mass = q.mass();
        let (m, n) = (p.len(), q.len());
        Self(Array2::from_shape_fn((m, n), |(i, j)| p.0[i] * q.0[j] / mass))
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_entries(self) -> Array2<f64> {
        self.0
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn row_sums(&self) -> Array1<f64> {
        self.0.sum_axis(Axis(1))
    }

    pub fn col_sums(&self) -> Array1<f64> {
        self.0.sum_axis(Axis(0))
    }

    pub fn mass(&self) -> f64 {
        self.0.sum()
    }

    pub fn positive_entries(&self) -> usize {
        self.0.iter().filter(|x| **x > 0.0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    /// Threshold on [`marginal_residual`]; `0.01` means 1%.
    pub residual_tol: f64,
    pub max_iters: usize,
    /// Force log-sum-exp updates regardless of `epsilon`.
    pub log_domain: bool,
}

impl SinkhornConfig {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn with_tol(mut self, residual_tol: f64) -> Self {
        self.residual_tol = residual_tol;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_log_domain(mut self, log_domain: bool) -> Self {
        self.log_domain = log_domain;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_epsilon(self.epsilon)?;
        if !(self.residual_tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "residual tolerance must be positive, got {}",
                self.residual_tol
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            residual_tol: 1e-3,
            max_iters: 10_000,
            log_domain: false,
        }
    }
}

/// Scaling vectors `a = exp(log_a)`, `b = exp(log_b)`, i.e. the dual
/// potentials `alpha = -log_a`, `beta = -log_b`.
///
/// Rows or columns with zero marginal mass carry `-inf` (a zero scaling).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingVectors {
    log_a: Array1<f64>,
    log_b: Array1<f64>,
}

impl ScalingVectors {
    pub fn log_a(&self) -> &Array1<f64> {
        &self.log_a
    }

    pub fn log_b(&self) -> &Array1<f64> {
        &self.log_b
    }

    /// May underflow or overflow for small epsilon; prefer the log form.
    pub fn a(&self) -> Array1<f64> {
        self.log_a.mapv(f64::exp)
    }

    pub fn b(&self) -> Array1<f64> {
        self.log_b.mapv(f64::exp)
    }

    /// `exp(log_a_i + log_b_j - C_ij / epsilon)` for every entry.
    pub fn plan(&self, cost: &CostMatrix, epsilon: f64) -> TransportPlan {
        TransportPlan(plan_from_potentials(cost.0.view(), epsilon, &self.log_a, &self.log_b))
    }
}

fn plan_from_potentials(
    cost: ArrayView2<f64>,
    epsilon: f64,
    log_a: &Array1<f64>,
    log_b: &Array1<f64>,
) -> Array2<f64> {
    Array2::from_shape_fn(cost.dim(), |(i, j)| {
        let (u, v) = (log_a[i], log_b[j]);
        if u == f64::NEG_INFINITY || v == f64::NEG_INFINITY {
            0.0
        } else {
            (u + v - cost[[i, j]] / epsilon).exp()
        }
    })
}

#[derive(Debug, Clone)]
pub struct SinkhornSolution {
    pub plan: TransportPlan,
    pub scaling: ScalingVectors,
    pub report: SolveReport,
    /// Residual after each completed iteration (index 0 is iteration 1).
    pub residuals: Vec<f64>,
}

/// Brings `q` to the mass of `p` when they agree within [`MASS_TOLERANCE`].
pub fn balance(p: &Marginal, q: &Marginal) -> Result<Marginal> {
    let (mp, mq) = (p.mass(), q.mass());
    let rel = (mp - mq).abs() / mp;
    if rel > MASS_TOLERANCE {
        return Err(Error::InvalidInput(format!(
            "marginal masses differ: {mp} vs {mq} (relative {rel:.3e})"
        )));
    }
    if mp == mq {
        Ok(q.clone())
    } else {
        Ok(q.scaled(mp / mq))
    }
}

struct Scaling {
    log_a: Vec<f64>,
    log_b: Vec<f64>,
    iterations: usize,
    residuals: Vec<f64>,
    converged: bool,
}

struct Problem<'a> {
    cost: ArrayView2<'a, f64>,
    p: Vec<f64>,
    q: Vec<f64>,
    mass: f64,
    epsilon: f64,
    tol: f64,
    max_iters: usize,
    /// Starting `log b`; all zeros when absent.
    init_log_b: Option<Vec<f64>>,
}

/// Sinkhorn scaling for `min <C, x> - epsilon H(x)` subject to the marginals.
///
/// Stops when [`marginal_residual`] drops to `cfg.residual_tol` or after
/// `cfg.max_iters` iterations; in the latter case the lowest-residual
/// iterate is returned and `report.converged` is false.
pub fn sinkhorn(
    cost: &CostMatrix,
    p: &Marginal,
    q: &Marginal,
    cfg: &SinkhornConfig,
) -> Result<SinkhornSolution> {
    solve(cost, p, q, cfg, None)
}

/// Sinkhorn started from the column potentials `log_b` of an earlier solve
/// instead of `b = 1`. Non-finite entries start at zero.
pub fn sinkhorn_warm(
    cost: &CostMatrix,
    p: &Marginal,
    q: &Marginal,
    cfg: &SinkhornConfig,
    log_b: &Array1<f64>,
) -> Result<SinkhornSolution> {
    if log_b.len() != q.len() {
        return Err(dims(q.len().to_string(), log_b.len().to_string()));
    }
    solve(cost, p, q, cfg, Some(log_b))
}

/// Epsilon scaling: solves at `start_epsilon`, halving down to
/// `cfg.epsilon`, each stage warm-started from the previous potentials.
/// Intermediate stages stop at `max(cfg.residual_tol, stage_tol)`; each
/// stage gets the full `cfg.max_iters` budget. The report sums iterations
/// and wall time over all stages.
pub fn sinkhorn_annealed(
    cost: &CostMatrix,
    p: &Marginal,
    q: &Marginal,
    cfg: &SinkhornConfig,
    start_epsilon: f64,
    stage_tol: f64,
) -> Result<SinkhornSolution> {
    cfg.validate()?;
    if !(start_epsilon.is_finite() && start_epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!("start epsilon must be positive, got {start_epsilon}")));
    }
    let mut stages = Vec::new();
    let mut eps = start_epsilon;
    while eps > cfg.epsilon * (1.0 + 1e-12) {
        stages.push(eps);
        eps *= 0.5;
    }
    let stage_tol = cfg.residual_tol.max(stage_tol);
    let mut log_b: Option<Array1<f64>> = None;
    let mut prev_eps = start_epsilon;
    let mut iterations = 0;
    let mut wall = 0.0;
    let mut residuals = Vec::new();
    for &eps in &stages {
        let stage = SinkhornConfig { epsilon: eps, residual_tol: stage_tol, ..*cfg };
        let init = log_b.as_ref().map(|v| v.mapv(|x| x * prev_eps / eps));
        let sol = solve(cost, p, q, &stage, init.as_ref())?;
        iterations += sol.report.iterations;
        wall += sol.report.wall_time_ms;
        residuals.extend_from_slice(&sol.residuals);
        log_b = Some(sol.scaling.log_b);
        prev_eps = eps;
    }
    let init = log_b.map(|v| v.mapv(|x| x * prev_eps / cfg.epsilon));
    let mut sol = solve(cost, p, q, cfg, init.as_ref())?;
    sol.report.iterations += iterations;
    sol.report.wall_time_ms += wall;
    residuals.extend_from_slice(&sol.residuals);
    sol.residuals = residuals;
    Ok(sol)
}

fn solve(
    cost: &CostMatrix,
    p: &Marginal,
    q: &Marginal,
    cfg: &SinkhornConfig,
    init_log_b: Option<&Array1<f64>>,
) -> Result<SinkhornSolution> {
    cfg.validate()?;
    cost.check_shape(p.len(), q.len())?;
    let q = balance(p, q)?;
    let start = Instant::now();

    // Zero-mass rows and columns are solved out and reinserted afterwards.
    let rows: Vec<usize> = (0..p.len()).filter(|&i| p.0[i] > 0.0).collect();
    let cols: Vec<usize> = (0..q.len()).filter(|&j| q.0[j] > 0.0).collect();
    let reduced;
    let sub_cost = if rows.len() == p.len() && cols.len() == q.len() {
        cost.0.view()
    } else {
        reduced = cost.0.select(Axis(0), &rows).select(Axis(1), &cols);
        reduced.view()
    };
    let problem = Problem {
        cost: sub_cost,
        p: rows.iter().map(|&i| p.0[i]).collect(),
        q: cols.iter().map(|&j| q.0[j]).collect(),
        mass: p.mass(),
        epsilon: cfg.epsilon,
        tol: cfg.residual_tol,
        max_iters: cfg.max_iters,
        init_log_b: init_log_b.map(|v| {
            cols.iter().map(|&j| if v[j].is_finite() { v[j] } else { 0.0 }).collect()
        }),
    };

    let cmax = sub_cost.iter().copied().fold(0.0, f64::max);
    let mut log_domain = cfg.log_domain || cfg.epsilon < LOG_DOMAIN_RATIO * cmax;
    let scaling = if log_domain {
        scale_log(&problem)
    } else {
        match scale_standard(&problem) {
            Some(s) => s,
            None => {
                log::debug!("sinkhorn: scaling denominator underflow, escalating to log domain");
                log_domain = true;
                scale_log(&problem)
            }
        }
    };

    let mut log_a = Array1::from_elem(p.len(), f64::NEG_INFINITY);
    let mut log_b = Array1::from_elem(q.len(), f64::NEG_INFINITY);
    for (k, &i) in rows.iter().enumerate() {
        log_a[i] = scaling.log_a[k];
    }
    for (k, &j) in cols.iter().enumerate() {
        log_b[j] = scaling.log_b[k];
    }
    let scaling_vectors = ScalingVectors { log_a, log_b };
    let plan = scaling_vectors.plan(cost, cfg.epsilon);
    let final_residual = marginal_residual(&plan, p, &q)?;
    let total_cost = transport_cost(&plan, cost)?;
    let report = SolveReport {
        method: "sinkhorn".into(),
        iterations: scaling.iterations,
        final_residual,
        cost: total_cost,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        converged: scaling.converged,
        log_domain,
    };
    if !report.converged {
        log::warn!(
            "sinkhorn hit max_iters={} with residual {:.3e}",
            cfg.max_iters,
            final_residual
        );
    }
    Ok(SinkhornSolution {
        plan,
        scaling: scaling_vectors,
        report,
        residuals: scaling.residuals,
    })
}

/// Tracks the lowest-residual iterate for the max-iteration fallback.
struct Best {
    residual: f64,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Best {
    fn new() -> Self {
        Self {
            residual: f64::INFINITY,
            a: Vec::new(),
            b: Vec::new(),
        }
    }

    fn offer(&mut self, residual: f64, a: &[f64], b: &[f64]) {
        if residual < self.residual {
            self.residual = residual;
            self.a.clear();
            self.a.extend_from_slice(a);
            self.b.clear();
            self.b.extend_from_slice(b);
        }
    }
}

/// Multiplicative updates on `a`, `b`. Returns `None` on underflow.
fn scale_standard(pb: &Problem) -> Option<Scaling> {
    let (m, n) = pb.cost.dim();
    let kernel = Array2::from_shape_fn((n, m), |(j, i)| (-pb.cost[[i, j]] / pb.epsilon).exp());
    let mut a = Array1::<f64>::zeros(m);
    let mut b = match &pb.init_log_b {
        Some(v) => v.iter().map(|x| x.exp()).collect(),
        None => Array1::<f64>::ones(n),
    };
    let mut kb = Array1::<f64>::zeros(m);
    let mut kta = Array1::<f64>::zeros(n);
    let mut residuals = Vec::new();
    let mut col_residual = 0.0;
    let mut best = Best::new();
    let mut iterations = 0;
    loop {
        mat_vec(&kernel, &b, &mut kb);
        if iterations > 0 {
            let row_residual: f64 = (0..m).map(|i| (a[i] * kb[i] - pb.p[i]).abs()).sum();
            let residual = (row_residual + col_residual) / pb.mass;
            residuals.push(residual);
            if residual <= pb.tol {
                return Some(finish_standard(&a, &b, iterations, residuals, true));
            }
            best.offer(residual, a.as_slice()?, b.as_slice()?);
            if iterations >= pb.max_iters {
                let (a, b) = (Array1::from(best.a), Array1::from(best.b));
                return Some(finish_standard(&a, &b, iterations, residuals, false));
            }
        }
        for i in 0..m {
            if !(kb[i] >= UNDERFLOW_FLOOR && kb[i].is_finite()) {
                return None;
            }
            a[i] = pb.p[i] / kb[i];
        }
        mat_t_vec(&kernel, &a, &mut kta);
        col_residual = 0.0;
        for j in 0..n {
            if !(kta[j] >= UNDERFLOW_FLOOR && kta[j].is_finite()) {
                return None;
            }
            b[j] = pb.q[j] / kta[j];
            if !b[j].is_finite() {
                return None;
            }
            col_residual += (b[j] * kta[j] - pb.q[j]).abs();
        }
        iterations += 1;
    }
}

fn finish_standard(
    a: &Array1<f64>,
    b: &Array1<f64>,
    iterations: usize,
    residuals: Vec<f64>,
    converged: bool,
) -> Scaling {
    Scaling {
        log_a: a.iter().map(|x| x.ln()).collect(),
        log_b: b.iter().map(|x| x.ln()).collect(),
        iterations,
        residuals,
        converged,
    }
}

/// Scalings outside `[1/ABSORB_LIMIT, ABSORB_LIMIT]` are folded into the
/// log potentials.
const ABSORB_LIMIT: f64 = 1e100;

/// Log-domain scaling. The kernel is held as `exp(u_i + v_j - C_ij/eps)`
/// and the multiplicative updates run on it; the scalings are absorbed
/// into `(u, v)` when they grow, and a row or column whose stabilized sum
/// still underflows is updated by log-sum-exp directly.
fn scale_log(pb: &Problem) -> Scaling {
    let s = pb.cost.mapv(|c| c / pb.epsilon);
    let (m, n) = s.dim();
    let log_p: Vec<f64> = pb.p.iter().map(|x| x.ln()).collect();
    let log_q: Vec<f64> = pb.q.iter().map(|x| x.ln()).collect();
    let mut st = Stabilized {
        s: &s,
        u: vec![0.0; m],
        v: pb.init_log_b.clone().unwrap_or_else(|| vec![0.0; n]),
        a: Array1::ones(m),
        b: Array1::ones(n),
        kernel: Array2::zeros((n, m)),
    };
    st.rebuild();
    let mut kb = Array1::<f64>::zeros(m);
    let mut kta = Array1::<f64>::zeros(n);
    let mut residuals = Vec::new();
    let mut col_residual = 0.0;
    let mut best = BestLog {
        residual: f64::INFINITY,
        state: st.state(),
    };
    let mut iterations = 0;
    loop {
        mat_vec(&st.kernel, &st.b, &mut kb);
        if iterations > 0 {
            let row_residual: f64 = (0..m).map(|i| (st.a[i] * kb[i] - pb.p[i]).abs()).sum();
            let residual = (row_residual + col_residual) / pb.mass;
            residuals.push(residual);
            if residual <= pb.tol {
                let (log_a, log_b) = st.potentials();
                return Scaling {
                    log_a,
                    log_b,
                    iterations,
                    residuals,
                    converged: true,
                };
            }
            if residual < best.residual {
                best.residual = residual;
                st.save(&mut best.state);
            }
            if iterations >= pb.max_iters {
                let (log_a, log_b) = best.potentials();
                return Scaling {
                    log_a,
                    log_b,
                    iterations,
                    residuals,
                    converged: false,
                };
            }
        }
        for i in 0..m {
            if kb[i] >= UNDERFLOW_FLOOR && kb[i].is_finite() {
                st.a[i] = pb.p[i] / kb[i];
            } else {
                st.row_update(i, log_p[i]);
            }
        }

        mat_t_vec(&st.kernel, &st.a, &mut kta);
        col_residual = 0.0;
        for j in 0..n {
            if kta[j] >= UNDERFLOW_FLOOR && kta[j].is_finite() {
                st.b[j] = pb.q[j] / kta[j];
                col_residual += (st.b[j] * kta[j] - pb.q[j]).abs();
            } else {
                st.col_update(j, log_q[j]);
            }
        }
        iterations += 1;

        let out_of_range = |x: &f64| !(*x <= ABSORB_LIMIT && *x >= 1.0 / ABSORB_LIMIT);
        if st.a.iter().any(out_of_range) || st.b.iter().any(out_of_range) {
            st.absorb();
        }
    }
}

// Kernels are stored transposed (`n x m`): with many more devices than
// RRHs both products then run over long contiguous rows.

/// `K x` for the transposed kernel `kt = K^T`.
fn mat_vec(kt: &Array2<f64>, x: &Array1<f64>, out: &mut Array1<f64>) {
    out.fill(0.0);
    for (xj, row) in x.iter().zip(kt.outer_iter()) {
        out.scaled_add(*xj, &row);
    }
}

/// `K^T x` for the transposed kernel `kt = K^T`.
fn mat_t_vec(kt: &Array2<f64>, x: &Array1<f64>, out: &mut Array1<f64>) {
    for (o, row) in out.iter_mut().zip(kt.outer_iter()) {
        *o = row.dot(x);
    }
}

/// `(u, v, a, b)` of the lowest-residual log-domain iterate.
struct BestLog {
    residual: f64,
    state: [Vec<f64>; 4],
}

impl BestLog {
    fn potentials(&self) -> (Vec<f64>, Vec<f64>) {
        let [u, v, a, b] = &self.state;
        let la = u.iter().zip(a).map(|(u, a)| u + a.ln()).collect();
        let lb = v.iter().zip(b).map(|(v, b)| v + b.ln()).collect();
        (la, lb)
    }
}

/// Potentials `(u, v)`, residual scalings `(a, b)` and the transposed
/// kernel `kernel_ji = exp(u_i + v_j - s_ij)`; the plan is
/// `a_i kernel_ji b_j`.
struct Stabilized<'a> {
    s: &'a Array2<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    a: Array1<f64>,
    b: Array1<f64>,
    kernel: Array2<f64>,
}

impl Stabilized<'_> {
    fn state(&self) -> [Vec<f64>; 4] {
        [self.u.clone(), self.v.clone(), self.a.to_vec(), self.b.to_vec()]
    }

    fn save(&self, into: &mut [Vec<f64>; 4]) {
        let [u, v, a, b] = into;
        u.clone_from(&self.u);
        v.clone_from(&self.v);
        a.clear();
        a.extend(self.a.iter());
        b.clear();
        b.extend(self.b.iter());
    }

    fn potentials(&self) -> (Vec<f64>, Vec<f64>) {
        let la = self.u.iter().zip(&self.a).map(|(u, a)| u + a.ln()).collect();
        let lb = self.v.iter().zip(&self.b).map(|(v, b)| v + b.ln()).collect();
        (la, lb)
    }

    /// Folds `a`, `b` into the potentials, re-centres every row so its
    /// largest kernel entry is 1, and recomputes the kernel.
    fn absorb(&mut self) {
        let (la, lb) = self.potentials();
        self.v = lb;
        self.b.fill(1.0);
        self.rebuild();
        for i in 0..self.u.len() {
            self.a[i] = (la[i] - self.u[i]).exp();
        }
    }

    fn rebuild(&mut self) {
        for (i, row) in self.s.outer_iter().enumerate() {
            let hi = row.iter().zip(&self.v).map(|(s, v)| v - s).fold(f64::NEG_INFINITY, f64::max);
            self.u[i] = -hi;
            let ui = self.u[i];
            for ((k, s), v) in self.kernel.column_mut(i).iter_mut().zip(row.iter()).zip(&self.v) {
                *k = (ui + v - s).exp();
            }
        }
    }

    fn row_update(&mut self, i: usize, log_p: f64) {
        let row = self.s.row(i);
        let lse = log_sum_exp(row.iter().zip(&self.v).zip(self.b.iter()).map(|((s, v), b)| v + b.ln() - s));
        if !lse.is_finite() {
            return;
        }
        self.u[i] = log_p - lse;
        self.a[i] = 1.0;
        let ui = self.u[i];
        for ((k, s), v) in self.kernel.column_mut(i).iter_mut().zip(row.iter()).zip(&self.v) {
            *k = (ui + v - s).exp();
        }
    }

    fn col_update(&mut self, j: usize, log_q: f64) {
        let col = self.s.column(j);
        let lse = log_sum_exp(col.iter().zip(&self.u).zip(self.a.iter()).map(|((s, u), a)| u + a.ln() - s));
        if !lse.is_finite() {
            return;
        }
        self.v[j] = log_q - lse;
        self.b[j] = 1.0;
        let vj = self.v[j];
        for ((k, s), u) in self.kernel.row_mut(j).iter_mut().zip(col.iter()).zip(&self.u) {
            *k = (u + vj - s).exp();
        }
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let hi = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !hi.is_finite() {
        return hi;
    }
    hi + values.map(|x| (x - hi).exp()).sum::<f64>().ln()
}

/// `sum_ij C_ij x_ij`.
pub fn transport_cost(plan: &TransportPlan, cost: &CostMatrix) -> Result<f64> {
    cost.check_shape(plan.nrows(), plan.ncols())?;
    Ok(plan.0.iter().zip(cost.0.iter()).map(|(x, c)| x * c).sum())
}

/// `H(x) = -sum_ij x_ij (log x_ij - 1)` with `0 log 0 = 0`.
pub fn entropy(plan: &TransportPlan) -> f64 {
    -plan
        .0
        .iter()
        .filter(|x| **x > 0.0)
        .map(|x| x * (x.ln() - 1.0))
        .sum::<f64>()
}

/// `KL(x, xi) = sum_ij x_ij (log(x_ij / xi_ij) - 1)`.
pub fn kl_divergence(plan: &TransportPlan, kernel: &GibbsKernel) -> Result<f64> {
    if plan.0.dim() != kernel.entries.dim() {
        let (m, n) = kernel.entries.dim();
        return Err(dims(format!("{m}x{n}"), format!("{}x{}", plan.nrows(), plan.ncols())));
    }
    Ok(plan
        .0
        .iter()
        .zip(kernel.entries.iter())
        .filter(|(x, _)| **x > 0.0)
        .map(|(x, k)| x * ((x / k).ln() - 1.0))
        .sum())
}

/// Total absolute residual of both marginal constraints over `mass(p)`.
pub fn marginal_residual(plan: &TransportPlan, p: &Marginal, q: &Marginal) -> Result<f64> {
    if plan.nrows() != p.len() || plan.ncols() != q.len() {
        return Err(dims(
            format!("{}x{}", p.len(), q.len()),
            format!("{}x{}", plan.nrows(), plan.ncols()),
        ));
    }
    let rows: f64 = plan.row_sums().iter().zip(p.0.iter()).map(|(r, t)| (r - t).abs()).sum();
    let cols: f64 = plan.col_sums().iter().zip(q.0.iter()).map(|(c, t)| (c - t).abs()).sum();
    Ok((rows + cols) / p.mass())
}

/// Makes a nearly-feasible plan exactly feasible.
///
/// Rows are scaled down to at most `p`, columns to at most `q`, and the
/// remaining deficits are filled by the rank-one term
/// `err_r err_c^T / |err_c|_1`.
pub fn round_to_feasible(
    plan: &TransportPlan,
    p: &Marginal,
    q: &Marginal,
) -> Result<TransportPlan> {
    if plan.nrows() != p.len() || plan.ncols() != q.len() {
        return Err(dims(
            format!("{}x{}", p.len(), q.len()),
            format!("{}x{}", plan.nrows(), plan.ncols()),
        ));
    }
    let q = balance(p, q)?;
    let mut x = plan.0.clone();

    let rows = x.sum_axis(Axis(1));
    for (mut row, (r, target)) in x.outer_iter_mut().zip(rows.iter().zip(p.0.iter())) {
        if *r > *target {
            let f = target / r;
            row.mapv_inplace(|v| v * f);
        }
    }
    let cols = x.sum_axis(Axis(0));
    for (mut col, (c, target)) in x.axis_iter_mut(Axis(1)).zip(cols.iter().zip(q.0.iter())) {
        if *c > *target {
            let f = target / c;
            col.mapv_inplace(|v| v * f);
        }
    }

    let err_r: Vec<f64> =
        x.sum_axis(Axis(1)).iter().zip(p.0.iter()).map(|(r, t)| (t - r).max(0.0)).collect();
    let err_c: Vec<f64> =
        x.sum_axis(Axis(0)).iter().zip(q.0.iter()).map(|(c, t)| (t - c).max(0.0)).collect();
    let norm: f64 = err_c.iter().sum();
    if norm > 0.0 {
        for ((i, j), v) in x.indexed_iter_mut() {
            *v += err_r[i] * err_c[j] / norm;
        }
    }
    Ok(TransportPlan(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn m(w: &[f64]) -> Marginal {
        Marginal::new(w.to_vec()).unwrap()
    }

    fn swap_cost() -> CostMatrix {
        CostMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap()
    }

    #[test]
    fn kernel_of_zero_cost_is_ones() {
        let k = gibbs_kernel(&CostMatrix::new(Array2::zeros((2, 2))).unwrap(), 1.0).unwrap();
        assert!(k.entries().iter().all(|x| *x == 1.0));
    }

    #[test]
    fn kernel_at_cost_equal_epsilon() {
        let eps = 0.7;
        let k = gibbs_kernel(&CostMatrix::new(Array2::from_elem((3, 2), eps)).unwrap(), eps).unwrap();
        for x in k.entries() {
            assert_abs_diff_eq!(*x, 0.367879441171442, epsilon = 1e-12);
        }
    }

    #[test]
    fn kernel_of_swap_cost() {
        let k = gibbs_kernel(&swap_cost(), 0.5).unwrap();
        let e2 = (-2.0f64).exp();
        assert_abs_diff_eq!(k.entries(), &array![[1.0, e2], [e2, 1.0]], epsilon = 1e-15);
    }

    #[test]
    fn kernel_rejects_nonpositive_epsilon() {
        for eps in [0.0, -1.0, f64::NAN] {
            assert!(matches!(gibbs_kernel(&swap_cost(), eps), Err(Error::InvalidParameter(_))));
        }
    }

    #[test]
    fn singleton_plan() {
        let c = CostMatrix::new(array![[3.5]]).unwrap();
        let sol = sinkhorn(&c, &m(&[1.0]), &m(&[1.0]), &SinkhornConfig::new(0.1)).unwrap();
        assert_abs_diff_eq!(sol.plan.entries()[[0, 0]], 1.0, epsilon = 1e-12);
        assert!(sol.report.converged);
    }

    #[test]
    fn constant_cost_gives_product_plan() {
        let c = CostMatrix::new(Array2::from_elem((3, 4), 2.0)).unwrap();
        let p = m(&[0.2, 0.5, 0.3]);
        let q = m(&[0.1, 0.4, 0.25, 0.25]);
        let sol = sinkhorn(&c, &p, &q, &SinkhornConfig::new(1.0).with_tol(1e-12)).unwrap();
        let expected = TransportPlan::product(&p, &q);
        assert_abs_diff_eq!(sol.plan.entries(), expected.entries(), epsilon = 1e-12);
    }

    #[test]
    fn small_epsilon_recovers_diagonal() {
        let p = m(&[0.5, 0.5]);
        let cfg = SinkhornConfig::new(0.01).with_tol(1e-6);
        let sol = sinkhorn(&swap_cost(), &p, &p, &cfg).unwrap();
        assert!(sol.report.log_domain);
        assert_abs_diff_eq!(sol.plan.entries(), &array![[0.5, 0.0], [0.0, 0.5]], epsilon = 1e-3);
        assert!(transport_cost(&sol.plan, &swap_cost()).unwrap() < 1e-3);
    }

    #[test]
    fn mass_mismatch() {
        let c = swap_cost();
        let cfg = SinkhornConfig::new(0.5);
        let err = sinkhorn(&c, &m(&[0.5, 0.5]), &m(&[0.5, 0.6]), &cfg).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
        // float drift is rescaled away
        let sol = sinkhorn(&c, &m(&[0.5, 0.5]), &m(&[0.5, 0.5 + 1e-12]), &cfg).unwrap();
        assert!(sol.report.converged);
    }

    #[test]
    fn shape_mismatch() {
        let err = sinkhorn(&swap_cost(), &m(&[1.0]), &m(&[0.5, 0.5]), &SinkhornConfig::new(1.0));
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn zero_marginal_rows_are_reinserted_as_zeros() {
        let c = CostMatrix::from_rows(&[vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 1.0], vec![2.0, 1.0, 0.0]])
            .unwrap();
        let p = m(&[0.5, 0.0, 0.5]);
        let q = m(&[0.0, 0.5, 0.5]);
        let sol = sinkhorn(&c, &p, &q, &SinkhornConfig::new(0.5).with_tol(1e-10)).unwrap();
        let x = sol.plan.entries();
        assert!(x.row(1).iter().all(|v| *v == 0.0));
        assert!(x.column(0).iter().all(|v| *v == 0.0));
        assert!(x.iter().all(|v| v.is_finite()));
        assert!(marginal_residual(&sol.plan, &p, &q).unwrap() <= 1e-10);
    }

    #[test]
    fn standard_domain_reports_underflow() {
        // every kernel entry of the first row is exp(-1000) = 0 in f64
        let c = array![[1000.0, 1000.0], [0.0, 0.0]];
        let pb = Problem {
            cost: c.view(),
            p: vec![0.5, 0.5],
            q: vec![0.7, 0.3],
            mass: 1.0,
            epsilon: 1.0,
            tol: 1e-9,
            max_iters: 100,
            init_log_b: None,
        };
        assert!(scale_standard(&pb).is_none());
        let log = scale_log(&pb);
        assert!(log.converged);
        assert!(log.log_a.iter().chain(&log.log_b).all(|x| x.is_finite()));
    }

    #[test]
    fn tiny_epsilon_runs_in_log_domain_without_nan() {
        let c = CostMatrix::from_rows(&[vec![0.0, 1000.0], vec![1000.0, 0.0]]).unwrap();
        let p = m(&[0.5, 0.5]);
        let q = m(&[0.7, 0.3]);
        let sol = sinkhorn(&c, &p, &q, &SinkhornConfig::new(1.0).with_tol(1e-9)).unwrap();
        assert!(sol.report.log_domain);
        assert!(sol.plan.entries().iter().all(|x| x.is_finite()));
        assert!(sol.report.final_residual <= 1e-9);
        // the cheap diagonal carries as much mass as the marginals allow
        assert_abs_diff_eq!(sol.plan.entries()[[0, 0]], 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.plan.entries()[[1, 1]], 0.3, epsilon = 1e-9);
    }

    #[test]
    fn max_iters_returns_best_iterate_flagged() {
        let c = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let p = m(&[0.9, 0.1]);
        let q = m(&[0.1, 0.9]);
        let cfg = SinkhornConfig::new(0.05).with_tol(1e-14).with_max_iters(3);
        let sol = sinkhorn(&c, &p, &q, &cfg).unwrap();
        assert!(!sol.report.converged);
        assert_eq!(sol.report.iterations, 3);
        assert_eq!(sol.residuals.len(), 3);
        let best = sol.residuals.iter().copied().fold(f64::INFINITY, f64::min);
        assert_abs_diff_eq!(sol.report.final_residual, best, epsilon = 1e-12);
    }

    #[test]
    fn cost_examples() {
        let c = swap_cost();
        assert_eq!(transport_cost(&TransportPlan::zeros(2, 2), &c).unwrap(), 0.0);
        let diag = TransportPlan::new(array![[0.5, 0.0], [0.0, 0.5]]).unwrap();
        assert_eq!(transport_cost(&diag, &c).unwrap(), 0.0);
        let flat = TransportPlan::new(Array2::from_elem((2, 2), 0.25)).unwrap();
        assert_abs_diff_eq!(transport_cost(&flat, &c).unwrap(), 0.5, epsilon = 1e-15);
        assert!(transport_cost(&TransportPlan::zeros(3, 2), &c).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&TransportPlan::new(array![[1.0]]).unwrap()), 1.0);
        assert_eq!(entropy(&TransportPlan::zeros(2, 3)), 0.0);
        let diag = TransportPlan::new(array![[0.5, 0.0], [0.0, 0.5]]).unwrap();
        assert_abs_diff_eq!(entropy(&diag), 1.0 + std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn kl_examples() {
        let one = TransportPlan::new(array![[1.0]]).unwrap();
        let k = gibbs_kernel(&CostMatrix::new(array![[0.0]]).unwrap(), 1.0).unwrap();
        assert_eq!(kl_divergence(&one, &k).unwrap(), -1.0);

        let k = gibbs_kernel(&swap_cost(), 1.0).unwrap();
        let as_plan = TransportPlan::new(k.entries().clone()).unwrap();
        assert_abs_diff_eq!(kl_divergence(&as_plan, &k).unwrap(), -k.entries().sum(), epsilon = 1e-15);

        let plan = TransportPlan::new(array![[0.1, 0.3], [0.45, 0.15]]).unwrap();
        let lhs = kl_divergence(&plan, &k).unwrap();
        let rhs = transport_cost(&plan, &swap_cost()).unwrap() / 1.0 - entropy(&plan);
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
        assert!(kl_divergence(&TransportPlan::zeros(1, 2), &k).is_err());
    }

    #[test]
    fn residual_examples() {
        let p = m(&[0.5, 0.5]);
        let diag = TransportPlan::new(array![[0.5, 0.0], [0.0, 0.5]]).unwrap();
        assert_eq!(marginal_residual(&diag, &p, &p).unwrap(), 0.0);
        let one = m(&[1.0]);
        assert_eq!(marginal_residual(&TransportPlan::zeros(1, 1), &one, &one).unwrap(), 2.0);
        let q = m(&[0.1, 0.2, 0.7]);
        let prod = TransportPlan::product(&p, &q);
        assert!(marginal_residual(&prod, &p, &q).unwrap() <= 1e-12);
    }

    #[test]
    fn rounding_examples() {
        let p = m(&[0.5, 0.5]);
        let diag = TransportPlan::new(array![[0.5, 0.0], [0.0, 0.5]]).unwrap();
        assert_eq!(round_to_feasible(&diag, &p, &p).unwrap(), diag);
        let over = TransportPlan::new(array![[0.6, 0.0], [0.0, 0.6]]).unwrap();
        assert_abs_diff_eq!(
            round_to_feasible(&over, &p, &p).unwrap().entries(),
            diag.entries(),
            epsilon = 1e-15
        );
        let under = TransportPlan::new(array![[0.2, 0.1], [0.0, 0.3]]).unwrap();
        let fixed = round_to_feasible(&under, &p, &m(&[0.25, 0.75])).unwrap();
        assert!(marginal_residual(&fixed, &p, &m(&[0.25, 0.75])).unwrap() <= 1e-15);
    }

    #[test]
    fn negative_plans_are_rejected() {
        assert!(TransportPlan::new(array![[0.5, -0.1]]).is_err());
        assert!(Marginal::new(vec![1.0, -1.0]).is_err());
        assert!(Marginal::new(vec![0.0, 0.0]).is_err());
        assert!(CostMatrix::new(array![[f64::INFINITY]]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SinkhornConfig::new(1.0).with_tol(0.0).validate().is_err());
        assert!(SinkhornConfig::new(1.0).with_max_iters(0).validate().is_err());
        assert!(SinkhornConfig::new(-1.0).validate().is_err());
        assert!(SinkhornConfig::default().validate().is_ok());
    }
}
