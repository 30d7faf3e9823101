//! Batch front-end: load an experiment config, run solver and/or
//! simulator sweeps, and emit CSV/JSON results.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::{fmt_sig12, ExperimentConfig, PolicyName};
use remest::sim::{run_experiment, run_replication_with_trace, replication_rng, Policy, SimResult};
use remest::solver::{solve_age_opt, solve_mse_opt, AgeResult, SolverResult};

const CSV_HEADER: &str = "sweep_param,sweep_value,mse_opt,v_opt,age_opt,age_threshold,\
sim_mse_optimal,sim_mse_age,sim_mse_zerowait,ci_optimal,ci_age,ci_zerowait,runtime_s";

#[derive(Parser)]
#[command(name = "remest", version, about = "Sampling-policy solver and simulator for remote estimation of a Wiener process")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output path; overrides the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Concurrent sweep points.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dump a decimated (t, w, what, age) trace of the first replication.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Keep every n-th step in the trace.
    #[arg(long, default_value_t = 1000)]
    decimate: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the signal-aware optimum (threshold and objective value).
    Solve(CommonArgs),
    /// Solve the age-optimal (signal-agnostic) policy.
    SolveAge(CommonArgs),
    /// Simulate the configured policies on the configured channel.
    Simulate(SimulateArgs),
    /// Solve and simulate across the sweep grid, writing CSV rows.
    Sweep(CommonArgs),
    /// Schema- and range-check a config without running it.
    Validate(CommonArgs),
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Solve(args) => cmd_solve(args),
        Command::SolveAge(args) => cmd_solve_age(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Validate(args) => cmd_validate(args),
    };
    if let Err(err) = outcome {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn load_checked(args: &CommonArgs) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let violations = cfg.violations();
    if !violations.is_empty() {
        bail!("invalid config:\n  {}", violations.join("\n  "));
    }
    Ok(cfg)
}

/// Per-point seed: sweep point `index` gets its own stream family.
fn point_seed(base: u64, index: usize) -> u64 {
    let mut z = base ^ (index as u64).wrapping_mul(0xA076_1D64_78BD_642F);
    z = (z ^ (z >> 32)).wrapping_mul(0xE703_7ED1_A0B4_28DB);
    z ^ (z >> 29)
}

#[derive(Serialize)]
struct SimRecord {
    avg_mse: f64,
    avg_age: f64,
    sampling_rate: f64,
    successful_rate: f64,
    ci_halfwidth_mse: f64,
    ci_halfwidth_age: f64,
    epochs_observed: u64,
}

impl From<SimResult> for SimRecord {
    fn from(r: SimResult) -> Self {
        Self {
            avg_mse: r.avg_mse,
            avg_age: r.avg_age,
            sampling_rate: r.sampling_rate,
            successful_rate: r.successful_rate,
            ci_halfwidth_mse: r.ci_halfwidth_mse,
            ci_halfwidth_age: r.ci_halfwidth_age,
            epochs_observed: r.epochs_observed,
        }
    }
}

#[derive(Serialize)]
struct SolveRecord {
    mse_opt: f64,
    v: f64,
    age_opt: f64,
    age_threshold: f64,
    iterations: usize,
    h_trace: Vec<(f64, f64)>,
}

struct PointOutcome {
    sweep_value: Option<f64>,
    solver: SolverResult,
    age: AgeResult,
    sims: Vec<(PolicyName, SimResult)>,
    runtime_s: f64,
}

fn run_point(
    cfg: &ExperimentConfig,
    value: Option<f64>,
    index: usize,
    seed_override: Option<u64>,
    simulate: bool,
) -> Result<PointOutcome> {
    let start = Instant::now();
    let channel = cfg.channel_at(value)?;
    let solver_cfg = cfg.solver.build();
    let solver = solve_mse_opt(&channel, &solver_cfg)?;
    let age = solve_age_opt(&channel, &solver_cfg)?;

    let mut sims = Vec::new();
    if simulate {
        let base = seed_override.unwrap_or(cfg.sim.seed);
        let seed = if cfg.sweep.is_some() { point_seed(base, index) } else { base };
        let sim_cfg = cfg.sim.build(&channel, Some(seed));
        for &name in &cfg.policies {
            let policy = match name {
                PolicyName::Optimal => Policy::SignalAwareThreshold(solver.v),
                PolicyName::Age => Policy::AgeThreshold(age.threshold),
                PolicyName::Zerowait => Policy::ZeroWait,
            };
            let result = run_experiment(policy, &channel, &sim_cfg)
                .with_context(|| format!("simulating policy {name}"))?;
            sims.push((name, result));
        }
    }
    Ok(PointOutcome {
        sweep_value: value,
        solver,
        age,
        sims,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

fn cmd_solve(args: CommonArgs) -> Result<()> {
    let cfg = load_checked(&args)?;
    let outcome = run_point(&cfg, None, 0, args.seed, false)?;
    let record = SolveRecord {
        mse_opt: outcome.solver.mse_opt,
        v: outcome.solver.v,
        age_opt: outcome.age.age_opt,
        age_threshold: outcome.age.threshold,
        iterations: outcome.solver.outer_iters,
        h_trace: outcome.solver.h_values.clone(),
    };
    emit_json(&args.out, &record)
}

fn cmd_solve_age(args: CommonArgs) -> Result<()> {
    let cfg = load_checked(&args)?;
    let channel = cfg.channel_at(None)?;
    let age = solve_age_opt(&channel, &cfg.solver.build())?;
    let record = serde_json::json!({
        "age_opt": age.age_opt,
        "threshold": age.threshold,
        "is_zero_wait": age.is_zero_wait,
    });
    emit_json(&args.out, &record)
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let cfg = load_checked(&args.common)?;
    let channel = cfg.channel_at(None)?;
    let outcome = run_point(&cfg, None, 0, args.common.seed, true)?;

    if let Some(trace_path) = &args.trace {
        // Trace re-runs replication 0 of the first configured policy.
        let sim_cfg = cfg
            .sim
            .build(&channel, Some(args.common.seed.unwrap_or(cfg.sim.seed)));
        let policy = match cfg.policies[0] {
            PolicyName::Optimal => Policy::SignalAwareThreshold(outcome.solver.v),
            PolicyName::Age => Policy::AgeThreshold(outcome.age.threshold),
            PolicyName::Zerowait => Policy::ZeroWait,
        };
        let mut rng = replication_rng(sim_cfg.seed, 0);
        let mut sink = BufWriter::new(File::create(trace_path)?);
        writeln!(sink, "t,w,what,age")?;
        run_replication_with_trace(policy, &channel, &sim_cfg, &mut rng, args.decimate, &mut sink)?;
        sink.flush()?;
    }

    let sims: serde_json::Map<String, serde_json::Value> = outcome
        .sims
        .iter()
        .map(|(name, r)| {
            (name.to_string(), serde_json::to_value(SimRecord::from(*r)).unwrap())
        })
        .collect();
    let record = serde_json::json!({
        "mse_opt": outcome.solver.mse_opt,
        "v": outcome.solver.v,
        "age_opt": outcome.age.age_opt,
        "age_threshold": outcome.age.threshold,
        "policies": sims,
    });
    emit_json(&args.common.out, &record)
}

fn cmd_validate(args: CommonArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let violations = cfg.violations();
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("violation: {v}");
        }
        bail!("{} violation(s)", violations.len());
    }
    let channel = cfg.channel_at(None)?;
    let sim = cfg.sim.build(&channel, args.seed);
    let solver = cfg.solver.build();
    println!("config ok");
    println!("effective dt = {}", sim.dt);
    println!("effective seed = {}", sim.seed);
    println!("horizon = {}, replications = {}", sim.horizon, sim.replications);
    println!(
        "solver: eps1 = {}, eps2 = {}, grid_nodes = {}, gh_nodes = {}",
        solver.eps1, solver.eps2, solver.grid_nodes, solver.gh_nodes
    );
    for warning in sim.validate(&channel).unwrap_or_default() {
        println!("warning: {warning}");
    }
    Ok(())
}

#[derive(Serialize)]
struct SummaryPoint {
    sweep_param: String,
    sweep_value: f64,
    mse_opt: f64,
    v: f64,
    age_opt: f64,
    age_threshold: f64,
    age_is_zero_wait: bool,
    outer_iters: usize,
    inner_thresholds: Vec<f64>,
    h_trace: Vec<(f64, f64)>,
    runtime_s: f64,
    sims: serde_json::Map<String, serde_json::Value>,
}

fn cmd_sweep(args: CommonArgs) -> Result<()> {
    let cfg = load_checked(&args)?;
    let out_path = args
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .context("sweep needs an output path (--out or config.output)")?;

    let points: Vec<Option<f64>> = match &cfg.sweep {
        Some(s) => s.values.iter().map(|v| Some(*v)).collect(),
        None => vec![None],
    };
    let param_name = cfg
        .sweep
        .as_ref()
        .map(|s| s.parameter.to_string())
        .unwrap_or_else(|| "none".into());

    let outcomes = compute_points(&cfg, &points, args.seed, args.parallel.max(1))?;

    let mut file = BufWriter::new(
        File::create(&out_path).with_context(|| format!("creating {}", out_path.display()))?,
    );
    file.write_all(CSV_HEADER.as_bytes())?;
    file.write_all(b"\n")?;

    let mut summary = Vec::new();
    let mut failure: Option<(usize, anyhow::Error)> = None;
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(point) => {
                file.write_all(csv_row(&param_name, &point).as_bytes())?;
                file.write_all(b"\n")?;
                file.flush()?;
                summary.push(summary_point(&param_name, &point));
            }
            Err(e) => {
                failure = Some((i, e));
                break;
            }
        }
    }
    drop(file);

    let summary_path = summary_json_path(&out_path);
    let json = serde_json::to_string_pretty(&serde_json::json!({ "points": summary }))?;
    std::fs::write(&summary_path, json + "\n")?;

    if let Some((i, e)) = failure {
        let value = points[i].map(fmt_sig12).unwrap_or_else(|| "-".into());
        bail!("sweep point {i} ({param_name} = {value}) failed: {e:#}");
    }
    println!("wrote {} and {}", out_path.display(), summary_path.display());
    Ok(())
}

fn compute_points(
    cfg: &ExperimentConfig,
    points: &[Option<f64>],
    seed: Option<u64>,
    parallel: usize,
) -> Result<Vec<Result<PointOutcome>>> {
    if parallel <= 1 || points.len() <= 1 {
        return Ok(points
            .iter()
            .enumerate()
            .map(|(i, v)| run_point(cfg, *v, i, seed, true))
            .collect());
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<PointOutcome>>>> =
        Mutex::new((0..points.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..parallel.min(points.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= points.len() {
                    break;
                }
                let outcome = run_point(cfg, points[i], i, seed, true);
                slots.lock().unwrap()[i] = Some(outcome);
            });
        }
    });
    Ok(slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|slot| slot.expect("worker filled every slot"))
        .collect())
}

fn csv_row(param_name: &str, point: &PointOutcome) -> String {
    let find = |name: PolicyName| point.sims.iter().find(|(n, _)| *n == name).map(|(_, r)| r);
    let mse_cell = |name| find(name).map(|r: &SimResult| fmt_sig12(r.avg_mse)).unwrap_or_default();
    let ci_cell = |name| {
        find(name)
            .map(|r: &SimResult| fmt_sig12(r.ci_halfwidth_mse))
            .unwrap_or_default()
    };
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{:.3}",
        param_name,
        point.sweep_value.map(fmt_sig12).unwrap_or_else(|| "0".into()),
        fmt_sig12(point.solver.mse_opt),
        fmt_sig12(point.solver.v),
        fmt_sig12(point.age.age_opt),
        fmt_sig12(point.age.threshold),
        mse_cell(PolicyName::Optimal),
        mse_cell(PolicyName::Age),
        mse_cell(PolicyName::Zerowait),
        ci_cell(PolicyName::Optimal),
        ci_cell(PolicyName::Age),
        ci_cell(PolicyName::Zerowait),
        point.runtime_s,
    )
}

fn summary_point(param_name: &str, point: &PointOutcome) -> SummaryPoint {
    SummaryPoint {
        sweep_param: param_name.to_string(),
        sweep_value: point.sweep_value.unwrap_or(0.0),
        mse_opt: point.solver.mse_opt,
        v: point.solver.v,
        age_opt: point.age.age_opt,
        age_threshold: point.age.threshold,
        age_is_zero_wait: point.age.is_zero_wait,
        outer_iters: point.solver.outer_iters,
        inner_thresholds: point.solver.v_history.clone(),
        h_trace: point.solver.h_values.clone(),
        runtime_s: point.runtime_s,
        sims: point
            .sims
            .iter()
            .map(|(name, r)| {
                (name.to_string(), serde_json::to_value(SimRecord::from(*r)).unwrap())
            })
            .collect(),
    }
}

fn summary_json_path(out: &std::path::Path) -> PathBuf {
    let mut path = out.to_path_buf();
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "results".into());
    path.set_file_name(format!("{stem}.summary.json"));
    path
}

fn emit_json<T: Serialize>(out: &Option<PathBuf>, record: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(record)?;
    match out {
        Some(path) => {
            std::fs::write(path, json + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}
