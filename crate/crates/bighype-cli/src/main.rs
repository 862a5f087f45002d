//! Command-line driver: solve runs the hypergradient loop on a game
//! description, gen/gen-dr emit instances, check cross-validates an instance
//! against the oracle suite.

mod checks;
mod io;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use bighype::dr::{self, DRConfig};
use bighype::equilibrium::GameContext;
use bighype::outer::{run, Preset, RunOptions, Schedule, Schedules, Termination};
use bighype::{gen, GameSpec, Variant};

#[derive(Parser)]
#[command(
    name = "bighype",
    version,
    about = "Hypergradient solver for single-leader multi-follower Stackelberg games"
)]
struct Cli {
    /// Worker threads for the inner sweeps (default: available parallelism;
    /// also via BIGHYPE_WORKERS).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve an instance and emit trace.csv / summary.json (and plot.svg).
    Solve(SolveArgs),
    /// Generate a random instance (lqg | lqsg | aggregative).
    Gen(GenArgs),
    /// Generate the hierarchical demand-response instance.
    GenDr(GenDrArgs),
    /// Cross-validate an instance against the oracle suite.
    Check(CheckArgs),
}

#[derive(Args)]
struct SolveArgs {
    /// Game description JSON.
    #[arg(long)]
    config: PathBuf,
    /// Override the instance's variant tag (general | lqg | lqsg).
    #[arg(long)]
    variant: Option<String>,
    /// Tolerance preset: small | medium | large.
    #[arg(long, default_value = "large")]
    preset: String,
    /// Step-size schedule, e.g. power:3e-6:0.51 or const:1e-3.
    #[arg(long)]
    alpha: Option<String>,
    /// Relaxation schedule.
    #[arg(long)]
    beta: Option<String>,
    /// Equilibrium tolerance schedule.
    #[arg(long)]
    sigma_y: Option<String>,
    /// Sensitivity tolerance schedule.
    #[arg(long)]
    sigma_s: Option<String>,
    /// Override the projected-pseudo-gradient step.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    max_outer: usize,
    /// Outer termination: relative change of the leader objective.
    #[arg(long, default_value_t = 1e-5)]
    rel_tol: f64,
    #[arg(long, default_value_t = 100_000)]
    max_inner: usize,
    /// Initial leader point, comma-separated (defaults to proj_X(0)).
    #[arg(long)]
    x0: Option<String>,
    /// Seed echoed into the summary (the solver itself is deterministic).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Skip the schedule contract validation.
    #[arg(long)]
    force: bool,
    /// Record the leader iterate in every trace row.
    #[arg(long)]
    record_x: bool,
    /// Measure wall time per iteration (traces are byte-reproducible only
    /// with timing off).
    #[arg(long)]
    timing: bool,
    /// Emit plot.svg with the relative-suboptimality panels.
    #[arg(long)]
    plot: bool,
}

#[derive(Args)]
struct GenArgs {
    /// Instance family: lqg | lqsg | aggregative.
    family: String,
    #[arg(long, default_value_t = 3)]
    n_agents: usize,
    /// Per-agent decision dimension.
    #[arg(long, default_value_t = 2)]
    dim: usize,
    /// Leader dimension.
    #[arg(long, default_value_t = 4)]
    m: usize,
    /// Aggregate dimension (aggregative family).
    #[arg(long, default_value_t = 2)]
    n_bar: usize,
    /// Strongly convex leader cost (lqsg family).
    #[arg(long)]
    strongly_convex: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output path for the instance JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDrArgs {
    /// Buildings.
    #[arg(long, default_value_t = 3)]
    n: usize,
    /// Periods per day.
    #[arg(long, default_value_t = 8)]
    periods: usize,
    #[arg(long, default_value_t = 2)]
    seed: u64,
    /// Full DRConfig JSON (overrides the desk-scale defaults; --n/--periods/
    /// --seed still apply on top).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output path for the instance JSON.
    #[arg(long)]
    out: PathBuf,
    /// Also write the resolved DRConfig next to the instance.
    #[arg(long)]
    config_out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    config: PathBuf,
    /// Force a projected-pseudo-gradient step (the contraction check fails
    /// fast when it leaves the window).
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Smooth sample points for the derivative checks.
    #[arg(long, default_value_t = 3)]
    points: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let workers = cli
        .workers
        .or_else(|| std::env::var("BIGHYPE_WORKERS").ok().and_then(|v| v.parse().ok()));
    if let Some(w) = workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
            eprintln!("error: could not configure {w} workers: {e}");
            return ExitCode::from(1);
        }
    }
    let code = match cli.command {
        Command::Solve(args) => cmd_solve(args),
        Command::Gen(args) => cmd_gen(args),
        Command::GenDr(args) => cmd_gen_dr(args),
        Command::Check(args) => cmd_check(args),
    };
    match code {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

type CmdResult = Result<(), (u8, String)>;

fn config_err<E: std::fmt::Display>(e: E) -> (u8, String) {
    (1, e.to_string())
}

fn solver_err<E: std::fmt::Display>(e: E) -> (u8, String) {
    (2, e.to_string())
}

fn read_spec(path: &Path) -> Result<GameSpec, (u8, String)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    GameSpec::from_json(&text).map_err(config_err)
}

fn parse_variant(text: &str) -> Result<Variant, (u8, String)> {
    match text {
        "general" => Ok(Variant::General),
        "lqg" => Ok(Variant::Lqg),
        "lqsg" => Ok(Variant::Lqsg),
        other => Err(config_err(format!("unknown variant '{other}'"))),
    }
}

fn cmd_solve(args: SolveArgs) -> CmdResult {
    let mut spec = read_spec(&args.config)?;
    if let Some(v) = &args.variant {
        spec.variant = parse_variant(v)?;
    }
    if let Some(g) = args.gamma {
        spec.gamma = Some(g);
    }
    let variant = spec.variant;
    let preset = Preset::parse(&args.preset).map_err(config_err)?;
    let mut schedules = Schedules::defaults(variant, preset);
    let mut preset_used = Some(args.preset.as_str());
    for (slot, text) in [
        (&mut schedules.alpha, &args.alpha),
        (&mut schedules.beta, &args.beta),
    ] {
        if let Some(t) = text {
            *slot = Schedule::parse(t).map_err(config_err)?;
        }
    }
    if let Some(t) = &args.sigma_y {
        schedules.sigma_y = Schedule::parse(t).map_err(config_err)?;
        preset_used = None;
    }
    if let Some(t) = &args.sigma_s {
        schedules.sigma_s = Schedule::parse(t).map_err(config_err)?;
        preset_used = None;
    }

    let x0 = match &args.x0 {
        Some(text) => Some(parse_vector(text).map_err(config_err)?),
        None => None,
    };

    let ctx = GameContext::new(spec).map_err(config_err)?;
    let opts = RunOptions {
        max_outer: args.max_outer,
        rel_tol: args.rel_tol,
        inner_cap: args.max_inner,
        warmstart_cap: args.max_inner,
        x0,
        force_schedules: args.force,
        record_x: args.record_x,
        timing: args.timing,
        ..RunOptions::default()
    };
    let trace = run(&ctx, &schedules, &opts).map_err(|e| match e {
        bighype::Error::ScheduleContractViolation(_) | bighype::Error::DimensionMismatch(_) => {
            config_err(e)
        }
        other => solver_err(other),
    })?;

    io::atomic_write(&args.out.join("trace.csv"), &io::trace_csv(&trace)).map_err(solver_err)?;
    io::atomic_write(
        &args.out.join("summary.json"),
        &io::summary_json(
            &trace,
            variant,
            &schedules,
            preset_used,
            args.seed,
            args.rel_tol,
            args.max_outer,
        ),
    )
    .map_err(solver_err)?;
    if args.plot {
        io::atomic_write(&args.out.join("plot.svg"), &render_plot(&trace)).map_err(solver_err)?;
    }

    match &trace.summary.termination {
        Termination::Failed(msg) => Err((2, format!("solver failed: {msg} (partial trace flushed)"))),
        term => {
            println!(
                "terminated: {} after {} outer / {} inner iterations, phi_e = {}",
                term.as_str(),
                trace.summary.outer_iterations,
                trace.summary.total_inner_iterations,
                trace.summary.final_phi_e
            );
            Ok(())
        }
    }
}

fn render_plot(trace: &bighype::outer::RunTrace) -> String {
    let phi_best = trace.records.iter().map(|r| r.phi_e).fold(f64::INFINITY, f64::min);
    let denom = phi_best.abs().max(1e-12);
    let rel = |phi: f64| (phi - phi_best) / denom;
    let by_outer: Vec<(f64, f64)> = trace
        .records
        .iter()
        .map(|r| (r.k as f64, rel(r.phi_e)))
        .collect();
    let mut cumulative = 0usize;
    let by_inner: Vec<(f64, f64)> = trace
        .records
        .iter()
        .map(|r| {
            cumulative += r.inner_iterations;
            (cumulative as f64, rel(r.phi_e))
        })
        .collect();
    plot::render(
        &[
            plot::Panel {
                title: "vs outer iterations".to_string(),
                x_label: "outer iteration k".to_string(),
                points: by_outer,
            },
            plot::Panel {
                title: "vs total inner iterations".to_string(),
                x_label: "cumulative inner iterations".to_string(),
                points: by_inner,
            },
        ],
        "relative suboptimality",
    )
}

fn parse_vector(text: &str) -> Result<DVector<f64>, String> {
    let vals: Result<Vec<f64>, _> = text.split(',').map(|t| t.trim().parse::<f64>()).collect();
    vals.map(DVector::from_vec).map_err(|e| format!("vector '{text}': {e}"))
}

fn cmd_gen(args: GenArgs) -> CmdResult {
    if args.n_agents == 0 || args.dim == 0 || args.m == 0 || args.n_bar == 0 {
        return Err(config_err("sizes must be positive"));
    }
    let spec = match args.family.as_str() {
        "lqg" => gen::lqg(args.n_agents, args.dim, args.m, args.seed),
        "lqsg" => gen::lqsg(args.n_agents, args.dim, args.m, args.strongly_convex, args.seed),
        "aggregative" => gen::aggregative(args.n_agents, args.dim, args.m, args.n_bar, args.seed),
        other => return Err(config_err(format!("unknown family '{other}'"))),
    };
    let report = spec.validate().map_err(config_err)?;
    io::atomic_write(&args.out, &spec.to_json()).map_err(solver_err)?;
    println!(
        "wrote {} ({} agents, n = {}, m = {}, mu = {:.4e})",
        args.out.display(),
        report.n_agents,
        report.n,
        report.m,
        report.mu
    );
    Ok(())
}

fn cmd_gen_dr(args: GenDrArgs) -> CmdResult {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<DRConfig>(&text).map_err(config_err)?
        }
        None => DRConfig::desk(args.seed),
    };
    cfg.n = args.n;
    cfg.lambda = args.periods;
    cfg.seed = args.seed;
    if args.config.is_none() {
        cfg.delta_tau = 24.0 / args.periods as f64;
        cfg.grid_capacity = vec![args.n as f64];
    }
    let spec = dr::build(&cfg).map_err(config_err)?;
    spec.validate().map_err(config_err)?;
    io::atomic_write(&args.out, &spec.to_json()).map_err(solver_err)?;
    if let Some(cfg_out) = &args.config_out {
        let text = serde_json::to_string_pretty(&cfg).map_err(solver_err)?;
        io::atomic_write(cfg_out, &text).map_err(solver_err)?;
    }
    println!(
        "wrote {} (N = {}, periods = {}, m = {})",
        args.out.display(),
        cfg.n,
        cfg.lambda,
        2 * cfg.lambda + cfg.n
    );
    Ok(())
}

fn cmd_check(args: CheckArgs) -> CmdResult {
    let spec = read_spec(&args.config)?;
    let rows = checks::run_checks(spec, args.gamma, args.seed, args.points.max(1));
    let mut all_ok = true;
    println!("{:<26} {:<6} detail", "check", "result");
    for r in &rows {
        all_ok &= r.passed;
        println!(
            "{:<26} {:<6} {}",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.detail
        );
    }
    if all_ok {
        Ok(())
    } else {
        Err((3, "one or more checks failed".to_string()))
    }
}
