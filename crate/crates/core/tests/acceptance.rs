//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Every tolerance is a named constant below.

mod support;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use ndarray::Array2;

use ot_assoc::exact::exact_ot;
use ot_assoc::experiment::{
    bench, run_policies, strip_wall_times, sweep, BenchSpec, PolicySpec, RunOptions, SweepSpec,
};
use ot_assoc::model::{completion_time_with_loads, load, rate_matrix, Scenario};
use ot_assoc::ot::{round_to_feasible, sinkhorn, transport_cost, CostMatrix, Marginal, SinkhornConfig};
use ot_assoc::policies::{
    adaptive_sinkhorn, max_sinr_association, ot_association, AdaptiveConfig, CostMode, MarginalMode, OtSolver,
};
use ot_assoc::scenario::{generate, load_scenario, scenario_to_json, GeneratorSpec, ScenarioRng};

const C1_INSTANCES: usize = 50;
const C1_EPSILON: f64 = 0.005;
const C1_TOL: f64 = 1e-4;
const C1_COST_RATIO: f64 = 1.01;
const C1_SECONDS: f64 = 10.0;

const C2_SINKHORN_REL: f64 = 1e-3;
const C2_EXACT_REL: f64 = 1e-9;
const C2_EPSILON: f64 = 0.01;
const C2_TOL: f64 = 1e-5;
const C2_PEAK_LOAD: f64 = 0.5;

const C3_SIZES: [usize; 3] = [100, 500, 2000];
const C3_BAND: f64 = 0.02;

const C4_SPREAD: f64 = 0.1;
const C4_RATIO: f64 = 0.5;

const C5_GROWTH: f64 = 20.0;
const C5_EXACT_GAP: f64 = 10.0;
const C5_TOL: f64 = 1e-2;

type Outcome = Result<String, String>;

fn repo(path: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(path)
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ScenarioRng::new(2024);
    let p = Marginal::uniform(10, 1.0).map_err(|e| e.to_string())?;
    let cfg = SinkhornConfig::new(C1_EPSILON).with_tol(C1_TOL);
    let mut worst: f64 = 0.0;
    let mut capped = 0;
    for _ in 0..C1_INSTANCES {
        let cost = CostMatrix::new(Array2::from_shape_fn((10, 10), |_| rng.next_f64())).unwrap();
        let exact = exact_ot(&cost, &p, &p).map_err(|e| e.to_string())?.optimal_cost;
        let sol = sinkhorn(&cost, &p, &p, &cfg).map_err(|e| e.to_string())?;
        let rounded = round_to_feasible(&sol.plan, &p, &p).map_err(|e| e.to_string())?;
        let ratio = transport_cost(&rounded, &cost).unwrap() / exact;
        capped += usize::from(!sol.report.converged);
        worst = worst.max(ratio);
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "worst cost ratio {worst:.5} over {C1_INSTANCES} instances (limit {C1_COST_RATIO}), {secs:.2} s (limit {C1_SECONDS} s), {capped} stopped at max_iters"
    );
    if worst <= C1_COST_RATIO && secs < C1_SECONDS {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn half_loaded_scenario(m: usize, n: usize, seed: u64) -> Scenario {
    let s = generate(&GeneratorSpec::uniform(m, n, 1000.0, seed).with_demand_range(0.5, 1.5)).unwrap();
    let r = rate_matrix(&s);
    let peak = load(&max_sinr_association(&s, &r).unwrap(), &s, &r).unwrap().max();
    s.with_scaled_demands(C2_PEAK_LOAD / peak).unwrap()
}

fn total_load_equality() -> Outcome {
    let solver = OtSolver::Sinkhorn(SinkhornConfig::new(C2_EPSILON).with_tol(C2_TOL));
    let (mut worst_sinkhorn, mut worst_exact): (f64, f64) = (0.0, 0.0);
    let mut count = 0;
    for (m, n) in [(20, 4), (20, 25), (100, 4), (100, 25)] {
        for seed in 0..5 {
            let s = half_loaded_scenario(m, n, 100 + seed);
            let r = rate_matrix(&s);
            let base = load(&max_sinr_association(&s, &r).unwrap(), &s, &r).unwrap().total();
            let total = |solver: &OtSolver| -> Result<f64, String> {
                let out = ot_association(&s, &r, CostMode::InverseRate, MarginalMode::MaxSinrTraffic, solver)
                    .map_err(|e| format!("m={m} n={n} seed={seed}: {e}"))?;
                Ok(load(&out.association, &s, &r).unwrap().total())
            };
            worst_sinkhorn = worst_sinkhorn.max((total(&solver)? - base).abs() / base);
            worst_exact = worst_exact.max((total(&OtSolver::Exact)? - base).abs() / base);
            count += 1;
        }
    }
    let detail = format!(
        "{count} scenarios, worst relative total-load gap: sinkhorn {worst_sinkhorn:.2e} (limit {C2_SINKHORN_REL:e}), exact {worst_exact:.2e} (limit {C2_EXACT_REL:e})"
    );
    if worst_sinkhorn <= C2_SINKHORN_REL && worst_exact <= C2_EXACT_REL {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sweep_shape() -> Outcome {
    let spec = SweepSpec {
        device_counts: C3_SIZES.to_vec(),
        ..SweepSpec::default()
    };
    let rows = sweep(&spec).map_err(|e| e.to_string())?;
    let [euclid, invrate, traffic] = [&PolicySpec::SWEEP[1], &PolicySpec::SWEEP[2], &PolicySpec::SWEEP[3]];
    let ratio = |row: usize, p: &PolicySpec| rows[row].ratio(p);
    let mut problems = Vec::new();
    let mut table = Vec::new();
    for (k, row) in rows.iter().enumerate() {
        let show = |p: &PolicySpec| ratio(k, p).map_or("n/a".to_string(), |r| format!("{p} {r:.4}"));
        table.push(format!("m={}: {}, {}, {}", row.devices, show(euclid), show(invrate), show(traffic)));
        match ratio(k, traffic) {
            Some(r) if (r - 1.0).abs() <= C3_BAND => {}
            other => problems.push(format!("{traffic} at {} is {other:?}", row.devices)),
        }
    }
    let last = rows.len() - 1;
    for p in [euclid, invrate] {
        match (ratio(0, p), ratio(last, p)) {
            (Some(small), Some(large)) if small > 1.0 && large < small => {}
            other => problems.push(format!("{p} ratios at the smallest/largest count are {other:?}")),
        }
    }
    let detail = table.join("; ");
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", problems.join(", ")))
    }
}

fn hotspot_improvement() -> Outcome {
    let s = load_scenario(repo("fixtures/hotspot4.json")).map_err(|e| e.to_string())?;
    let r = rate_matrix(&s);
    let base = max_sinr_association(&s, &r).unwrap();
    let base_loads = load(&base, &s, &r).unwrap();
    let base_time = completion_time_with_loads(&base, &base_loads, s.env().mu, &r).map_err(|e| e.to_string())?;
    let out = adaptive_sinkhorn(&s, &r, &AdaptiveConfig::for_scenario(&s)).map_err(|e| e.to_string())?;
    let spread = out.loads.spread();
    let ratio = out.objective / base_time;
    let detail = format!(
        "maxSINR loads {:.3?}, adaptive loads {:.3?}; spread {spread:.4} (limit {C4_SPREAD}), completion-time ratio {ratio:.4} (limit {C4_RATIO}), improvement {:.2}x ({:.3e} s vs {:.3e} s)",
        base_loads.loads,
        out.loads.loads,
        1.0 / ratio,
        out.objective,
        base_time
    );
    if spread <= C4_SPREAD && ratio <= C4_RATIO {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn scaling_trend() -> Outcome {
    let spec = BenchSpec {
        sizes: vec![500, 5000],
        tolerances: vec![C5_TOL],
        ..BenchSpec::default()
    };
    let rows = bench(&spec).map_err(|e| e.to_string())?;
    let small = rows[0].sinkhorn[0].timing.median_ms;
    let large = rows[1].sinkhorn[0].timing.median_ms;
    let exact = rows[0].exact.as_ref().ok_or("exact solver skipped at 500 devices")?.median_ms;
    let growth = large / small;
    let gap = exact / small;
    let detail = format!(
        "sinkhorn {small:.3} ms -> {large:.3} ms, growth {growth:.2}x (limit {C5_GROWTH}x); exact at 500 {exact:.3} ms, {gap:.1}x sinkhorn (limit {C5_EXACT_GAP}x); medians of {}",
        spec.runs
    );
    if growth <= C5_GROWTH && gap >= C5_EXACT_GAP {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn invariant_suites() -> Outcome {
    let checks: [(&str, fn() -> Result<(), String>); 6] = [
        ("rounding", support::check_rounding),
        ("kl", support::check_kl_identity),
        ("load linearity", support::check_load_linearity),
        ("row-stochastic", support::check_row_stochastic),
        ("adaptive mass", support::check_adaptive_mass),
        ("certificate", support::check_certificate),
    ];
    let mut failures = Vec::new();
    for (name, check) in checks {
        if let Err(e) = check() {
            failures.push(format!("{name}: {e}"));
        }
    }
    let names: Vec<&str> = checks.iter().map(|c| c.0).collect();
    if failures.is_empty() {
        Ok(format!("{} properties x {} cases: {}", checks.len(), support::CASES, names.join(", ")))
    } else {
        Err(failures.join("; "))
    }
}

fn determinism() -> Outcome {
    let spec = GeneratorSpec::uniform(60, 9, 600.0, 42).with_demand_range(1e4, 5e4);
    let document = || -> Result<(String, String), String> {
        let s = generate(&spec).map_err(|e| e.to_string())?;
        let mut policies = PolicySpec::SWEEP.to_vec();
        policies.push(PolicySpec::Adaptive);
        let res = run_policies(&s, &policies, &RunOptions::default()).map_err(|e| e.to_string())?;
        let mut value: serde_json::Value = serde_json::from_str(&res.to_json()).unwrap();
        strip_wall_times(&mut value);
        Ok((scenario_to_json(&s), serde_json::to_string_pretty(&value).unwrap()))
    };
    let first = document()?;
    let second = document()?;
    if first == second {
        Ok(format!("scenario ({} bytes) and result ({} bytes) identical across two runs", first.0.len(), first.1.len()))
    } else {
        Err("documents differ between runs".into())
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("oracle equivalence", oracle_equivalence),
        ("total-load equality", total_load_equality),
        ("sweep shape", sweep_shape),
        ("hotspot improvement", hotspot_improvement),
        ("scaling trend", scaling_trend),
        ("invariant suites", invariant_suites),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {} {name}: {detail}", k + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name}: {detail}", k + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
