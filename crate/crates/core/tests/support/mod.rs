//! Strategies and the property checks shared by the invariant tests and
//! the acceptance run.

#![allow(dead_code)]

use ndarray::Array2;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use ot_assoc::exact::{certificate_gap, exact_ot};
use ot_assoc::model::{load, rate_matrix, Association, Point, Scenario};
use ot_assoc::ot::{
    entropy, gibbs_kernel, kl_divergence, marginal_residual, round_to_feasible, sinkhorn, transport_cost,
    CostMatrix, Marginal, SinkhornConfig, TransportPlan,
};
use ot_assoc::policies::{adaptive_sinkhorn, ot_association, AdaptiveConfig, CostMode, MarginalMode, OtSolver};
use ot_assoc::scenario::{generate, GeneratorSpec, Hotspot};
use ot_assoc::Error;

pub const CASES: u32 = 100;

pub fn config() -> Config {
    Config::with_cases(CASES)
}

pub fn matrix(m: usize, n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(lo..hi, m * n).prop_map(move |v| Array2::from_shape_vec((m, n), v).unwrap())
}

pub fn probability(len: usize) -> impl Strategy<Value = Marginal> {
    prop::collection::vec(0.05f64..1.0, len).prop_map(|w| {
        let total: f64 = w.iter().sum();
        Marginal::new(w.into_iter().map(|x| x / total).collect::<Vec<_>>()).unwrap()
    })
}

/// Cost matrix in `[0, 1)` with matching probability marginals.
pub fn instance(max_side: usize) -> impl Strategy<Value = (CostMatrix, Marginal, Marginal)> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(m, n)| {
        (matrix(m, n, 0.0, 1.0), probability(m), probability(n))
            .prop_map(|(c, p, q)| (CostMatrix::new(c).unwrap(), p, q))
    })
}

pub fn row_stochastic(m: usize, n: usize) -> impl Strategy<Value = Association> {
    matrix(m, n, 0.0, 1.0).prop_map(|mut x| {
        for mut row in x.outer_iter_mut() {
            row[0] += 1e-3;
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        Association::new(x).unwrap()
    })
}

pub fn small_scenario() -> impl Strategy<Value = Scenario> {
    (2usize..30, 2usize..6, any::<u64>(), prop::bool::ANY).prop_map(|(m, n, seed, hot)| {
        let mut spec = GeneratorSpec::uniform(m, n, 500.0, seed).with_demand_range(1e4, 1e5);
        if hot {
            spec = spec.with_hotspot(Hotspot {
                center: Point::new(150.0, 150.0),
                radius: 100.0,
                fraction: 0.7,
            });
        }
        generate(&spec).unwrap()
    })
}

pub fn row_sum_error(assoc: &Association) -> f64 {
    assoc.entries().outer_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max)
}

fn run<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    TestRunner::new(config()).run(&strategy, test).map_err(|e| e.to_string())
}

/// Rounded plans meet both marginals to 1e-12.
pub fn check_rounding() -> Result<(), String> {
    let strategy = (1usize..8, 1usize..8)
        .prop_flat_map(|(m, n)| (matrix(m, n, 0.0, 0.5), probability(m), probability(n)));
    run(strategy, |(plan, p, q)| {
        let plan = TransportPlan::new(plan).unwrap();
        let rounded = round_to_feasible(&plan, &p, &q).unwrap();
        let r = marginal_residual(&rounded, &p, &q).unwrap();
        prop_assert!(r <= 1e-12, "residual {r}");
        prop_assert!(rounded.entries().iter().all(|x| *x >= 0.0));
        Ok(())
    })
}

/// `KL(x, xi) = <C, x> / eps - H(x)` to 1e-10 relative.
pub fn check_kl_identity() -> Result<(), String> {
    run((instance(8), 0.05f64..2.0), |((cost, p, q), scale)| {
        let eps = scale * cost.mean().max(1e-3);
        let sol = sinkhorn(&cost, &p, &q, &SinkhornConfig::new(eps).with_tol(1e-6)).unwrap();
        let kernel = gibbs_kernel(&cost, eps).unwrap();
        let kl = kl_divergence(&sol.plan, &kernel).unwrap();
        let rhs = transport_cost(&sol.plan, &cost).unwrap() / eps - entropy(&sol.plan);
        prop_assert!((kl - rhs).abs() <= 1e-10 * kl.abs().max(rhs.abs()).max(1e-300), "{kl} vs {rhs}");
        Ok(())
    })
}

/// `rho(theta a + (1 - theta) b) = theta rho(a) + (1 - theta) rho(b)` to 1e-12.
pub fn check_load_linearity() -> Result<(), String> {
    let strategy = (
        small_scenario().prop_flat_map(|s| {
            let (m, n) = (s.num_devices(), s.num_rrhs());
            (Just(s), row_stochastic(m, n), row_stochastic(m, n))
        }),
        0.0f64..=1.0,
    );
    run(strategy, |((s, a, b), theta)| {
        let r = rate_matrix(&s);
        let la = load(&a, &s, &r).unwrap();
        let lb = load(&b, &s, &r).unwrap();
        let mixed = load(&a.mix(&b, theta).unwrap(), &s, &r).unwrap();
        for j in 0..s.num_rrhs() {
            let expected = theta * la.loads[j] + (1.0 - theta) * lb.loads[j];
            prop_assert!((mixed.loads[j] - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        }
        Ok(())
    })
}

/// Every policy association has rows summing to one within 1e-9.
pub fn check_row_stochastic() -> Result<(), String> {
    run((small_scenario(), 0usize..4), |(s, mode)| {
        let r = rate_matrix(&s);
        let (cm, mm) = [
            (CostMode::Euclidean, MarginalMode::EqualShare),
            (CostMode::Euclidean, MarginalMode::MaxSinrTraffic),
            (CostMode::InverseRate, MarginalMode::EqualShare),
            (CostMode::InverseRate, MarginalMode::MaxSinrTraffic),
        ][mode];
        let exact = ot_association(&s, &r, cm, mm, &OtSolver::Exact).unwrap();
        prop_assert!(row_sum_error(&exact.association) <= 1e-9);
        let solver = OtSolver::Sinkhorn(SinkhornConfig::new(0.03).with_tol(1e-3));
        match ot_association(&s, &r, cm, mm, &solver) {
            Ok(out) => prop_assert!(row_sum_error(&out.association) <= 1e-9),
            Err(Error::NotConverged { .. }) => {}
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        }
        Ok(())
    })
}

/// Each adaptive round's RRH marginal carries the total demand to 1e-9.
pub fn check_adaptive_mass() -> Result<(), String> {
    run(small_scenario(), |s| {
        let r = rate_matrix(&s);
        let mut cfg = AdaptiveConfig::for_scenario(&s);
        cfg.max_rounds = 20;
        let trace = match adaptive_sinkhorn(&s, &r, &cfg) {
            Ok(out) => {
                prop_assert!(row_sum_error(&out.association) <= 1e-9);
                out.trace
            }
            Err(Error::AdaptiveInfeasible(trace)) => *trace,
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let total = s.total_demand();
        for round in &trace.rounds {
            let mass: f64 = round.q.iter().sum();
            prop_assert!((mass - total).abs() <= 1e-9 * total);
            prop_assert!(round.q.iter().all(|x| *x >= 0.0));
        }
        Ok(())
    })
}

/// Exact plans come with dual potentials satisfying complementary
/// slackness to 1e-9, and are vertices (at most `m + n - 1` positive cells).
pub fn check_certificate() -> Result<(), String> {
    run(instance(10), |(cost, p, q)| {
        let sol = exact_ot(&cost, &p, &q).unwrap();
        let gap = certificate_gap(&cost, &sol);
        prop_assert!(gap <= 1e-9, "gap {gap}");
        prop_assert!(sol.plan.positive_entries() <= p.len() + q.len() - 1);
        prop_assert!(marginal_residual(&sol.plan, &p, &q).unwrap() <= 1e-12);
        Ok(())
    })
}
