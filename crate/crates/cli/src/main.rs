use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use ot_assoc::experiment::{
    bench, run_policies, sweep, write_bench_csv, write_sweep_csv, BenchSpec, PolicySpec, RunOptions, SweepSpec,
    DEFAULT_ADAPTIVE_EPSILON, DEFAULT_POLICY_EPSILON, DEFAULT_SWEEP_UTILIZATION,
};
use ot_assoc::model::Point;
use ot_assoc::scenario::{generate, load_scenario, scenario_to_json, GeneratorSpec, Hotspot};
use ot_assoc::Error;

const THREADS_VAR: &str = "OT_ASSOC_THREADS";

const EXIT_USAGE: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;

/// Device association for C-RAN cells via entropic optimal transport.
#[derive(Debug, Parser)]
#[command(name = "ot-assoc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Evaluate policies on a scenario file and write a JSON result document.
    Run(RunArgs),
    /// Time Sinkhorn against the exact solver; writes CSV.
    Bench(BenchArgs),
    /// Completion-time ratios vs maxSINR over device counts; writes CSV.
    Sweep(SweepArgs),
    /// Generate a seeded scenario file.
    Gen(GenArgs),
}

#[derive(Debug, Args)]
struct SolverArgs {
    /// Sinkhorn regularization in cost units; also sets the adaptive loop's.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Sinkhorn stopping tolerance on the relative marginal residual.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Adaptive step in demand units (default 2% of total demand).
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, default_value_t = 10_000)]
    max_iters: usize,
}

impl SolverArgs {
    fn options(&self) -> RunOptions {
        RunOptions {
            epsilon: self.epsilon.unwrap_or(DEFAULT_POLICY_EPSILON),
            adaptive_epsilon: self.epsilon.unwrap_or(DEFAULT_ADAPTIVE_EPSILON),
            tol: self.tol,
            max_iters: self.max_iters,
            delta: self.delta,
            ..RunOptions::default()
        }
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    scenario: PathBuf,
    /// maxsinr, adaptive or ot:{euclid,invrate}:{equal,maxsinr}; repeat or comma-separate.
    #[arg(long = "policy", required = true, value_delimiter = ',')]
    policies: Vec<PolicySpec>,
    #[command(flatten)]
    solver: SolverArgs,
    /// Output file (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [10, 50, 100, 500, 1000, 5000])]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 25)]
    rrhs: usize,
    /// Sinkhorn tolerances, one timing column each.
    #[arg(long = "tol", value_delimiter = ',', default_values_t = [1e-2, 1e-3])]
    tolerances: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Fixed regularization in cost units (default: 15 x each tolerance).
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = 7)]
    runs: usize,
    /// Largest devices x RRHs handed to the exact solver.
    #[arg(long, default_value_t = 500 * 25)]
    exact_cap: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [100, 200, 500, 1000, 2000, 5000])]
    devices: Vec<usize>,
    #[arg(long, default_value_t = 25)]
    rrhs: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1000.0)]
    side: f64,
    /// Mean maxSINR load each scenario is scaled to.
    #[arg(long, default_value_t = DEFAULT_SWEEP_UTILIZATION)]
    utilization: f64,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    devices: usize,
    #[arg(long)]
    rrhs: usize,
    /// Side of the square area, meters.
    #[arg(long, default_value_t = 1000.0)]
    side: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Demand range MIN,MAX in bits per second.
    #[arg(long, value_delimiter = ',', default_values_t = [1e5, 1e6])]
    demand: Vec<f64>,
    /// Hotspot disk X,Y,RADIUS,FRACTION.
    #[arg(long, value_delimiter = ',')]
    hotspot: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .map_err(|_| Error::InvalidParameter(format!("{THREADS_VAR}={value} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    log::debug!("using {threads} worker threads");
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<ExitCode> {
    let scenario = load_scenario(&args.scenario)?;
    let result = run_policies(&scenario, &args.policies, &args.solver.options())?;
    let mut out = output(args.out.as_deref())?;
    out.write_all(result.to_json().as_bytes())?;
    out.flush()?;
    if result.infeasible_only() {
        log::warn!("no selected policy produced a feasible association");
        return Ok(ExitCode::from(EXIT_INFEASIBLE));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(args: &BenchArgs) -> Result<ExitCode> {
    let spec = BenchSpec {
        sizes: args.sizes.clone(),
        rrhs: args.rrhs,
        tolerances: args.tolerances.clone(),
        seed: args.seed,
        epsilon: args.epsilon,
        runs: args.runs,
        exact_cap: args.exact_cap,
        ..BenchSpec::default()
    };
    let rows = bench(&spec)?;
    write_bench_csv(&rows, output(args.out.as_deref())?)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(args: &SweepArgs) -> Result<ExitCode> {
    let spec = SweepSpec {
        device_counts: args.devices.clone(),
        rrhs: args.rrhs,
        seed: args.seed,
        area_side: args.side,
        utilization: args.utilization,
        options: args.solver.options(),
    };
    let rows = sweep(&spec)?;
    write_sweep_csv(&rows, output(args.out.as_deref())?)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gen(args: &GenArgs) -> Result<ExitCode> {
    if args.demand.len() != 2 {
        return Err(Error::InvalidParameter("--demand takes MIN,MAX".into()).into());
    }
    let mut spec = GeneratorSpec::uniform(args.devices, args.rrhs, args.side, args.seed)
        .with_demand_range(args.demand[0], args.demand[1]);
    if let Some(h) = &args.hotspot {
        if h.len() != 4 {
            return Err(Error::InvalidParameter("--hotspot takes X,Y,RADIUS,FRACTION".into()).into());
        }
        spec = spec.with_hotspot(Hotspot {
            center: Point::new(h[0], h[1]),
            radius: h[2],
            fraction: h[3],
        });
    }
    let scenario = generate(&spec)?;
    let mut out = output(args.out.as_deref())?;
    out.write_all(scenario_to_json(&scenario).as_bytes())?;
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn dispatch(cli: &Cli) -> Result<ExitCode> {
    configure_threads()?;
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Gen(a) => cmd_gen(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            match err.downcast_ref::<Error>() {
                Some(Error::InvalidParameter(_)) => ExitCode::from(EXIT_USAGE),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
