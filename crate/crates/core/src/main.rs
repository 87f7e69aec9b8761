use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use aoi_core::io::{
    write_atomic, write_csv, write_csv_to, CompareRow, PolicyDocument, ThresholdRow, TraceRow,
};
use aoi_core::model::ModelParams;
use aoi_core::policies::PolicySpec;
use aoi_core::sim::{self, SimConfig, SimResult};
use aoi_core::solver::{self, SolveParams, DEFAULT_MAX_ITER, DEFAULT_TOL};
use aoi_core::verify::{self, VerifyOptions};

/// Directory for outputs whose `--out` is relative or omitted.
const OUT_DIR_VAR: &str = "AOI_OUT_DIR";

#[derive(Parser)]
#[command(name = "aoi", version, about = "Optimal preemption policies for coded status updates over an erasure channel")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for an optimal policy and optionally save it as a JSON document.
    Solve(SolveArgs),
    /// Check the structural properties of a saved policy document.
    Verify(VerifyArgs),
    /// Compare optimal and persistent policies over a grid of p.
    Compare(CompareArgs),
    /// Extract per-(delta0, d) thresholds from a saved policy.
    Thresholds(ThresholdArgs),
    /// Emit a per-slot AoI trajectory.
    Trace(TraceArgs),
    /// Estimate the average AoI of a policy by simulation.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Average,
    Discounted,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    k: Option<u32>,
    #[arg(long)]
    p: Option<f64>,
    /// Truncation boundary; defaults to max(2k, ceil(30k/p)).
    #[arg(long)]
    delta_max: Option<u32>,
}

impl ModelArgs {
    fn require(&self) -> Result<ModelParams> {
        let (k, p) = match (self.k, self.p) {
            (Some(k), Some(p)) => (k, p),
            _ => bail!("--k and --p are required"),
        };
        build_model(k, p, self.delta_max)
    }
}

fn build_model(k: u32, p: f64, delta_max: Option<u32>) -> Result<ModelParams> {
    Ok(match delta_max {
        Some(dm) => ModelParams::new(k, p, dm)?,
        None => ModelParams::with_default_boundary(k, p)?,
    })
}

fn on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected on or off, got {s:?}")),
    }
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value = "average")]
    mode: Mode,
    /// Discount factor (discounted mode only).
    #[arg(long, default_value_t = 0.999)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    max_iter: usize,
    /// Prune argmin evaluations using the threshold structure.
    #[arg(long, value_parser = on_off, num_args = 0..=1, default_value = "off", default_missing_value = "on")]
    structured: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    policy: PathBuf,
    /// Slots below delta_max excluded from boundary-sensitive checks (default k).
    #[arg(long)]
    margin: Option<u32>,
    #[arg(long, default_value_t = verify::DEFAULT_EPSILON)]
    epsilon: f64,
}

#[derive(Args)]
struct SimArgs {
    /// Slots simulated per seed.
    #[arg(long, default_value_t = 1_000_000)]
    horizon: u64,
    /// Slots discarded per seed; defaults to ceil(10k/p).
    #[arg(long)]
    burn_in: Option<u64>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9,10")]
    seeds: Vec<u64>,
}

impl SimArgs {
    fn config(&self, model: &ModelParams) -> SimConfig {
        let cfg = SimConfig::new(model, self.horizon, self.seeds.clone());
        match self.burn_in {
            Some(b) => cfg.with_burn_in(b),
            None => cfg,
        }
    }
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    k: u32,
    /// Grid of erasure-free probabilities as start:stop:step.
    #[arg(long, default_value = "0.1:0.9:0.1")]
    p_grid: String,
    #[arg(long)]
    delta_max: Option<u32>,
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ThresholdArgs {
    #[arg(long)]
    policy: PathBuf,
    /// Only emit thresholds for this starting AoI.
    #[arg(long)]
    delta0: Option<u32>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// `persistent`, `optimal`, or the path of a policy document.
    #[arg(long, default_value = "optimal")]
    policy: String,
    #[arg(long, default_value_t = 50)]
    slots: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// `persistent`, `optimal`, or the path of a policy document.
    #[arg(long, default_value = "optimal")]
    policy: String,
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
enum Failure {
    Violation(anyhow::Error),
    Usage(anyhow::Error),
    NonConvergence(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Violation(_) => 1,
            Failure::Usage(_) => 2,
            Failure::NonConvergence(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Violation(e) | Failure::Usage(e) | Failure::NonConvergence(e) => e,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Compare(a) => cmd_compare(a).map_err(Failure::from),
        Command::Thresholds(a) => cmd_thresholds(a),
        Command::Trace(a) => cmd_trace(a).map_err(Failure::from),
        Command::Simulate(a) => cmd_simulate(a).map_err(Failure::from),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

/// Resolves `--out`: relative paths land under `$AOI_OUT_DIR` when it is set;
/// with no `--out`, `default_name` is used there, or nothing when it is unset.
fn output_path(out: Option<&Path>, default_name: &str) -> Option<PathBuf> {
    let dir = std::env::var_os(OUT_DIR_VAR).map(PathBuf::from);
    match (out, dir) {
        (Some(p), Some(dir)) if p.is_relative() => Some(dir.join(p)),
        (Some(p), _) => Some(p.to_path_buf()),
        (None, Some(dir)) => Some(dir.join(default_name)),
        (None, None) => None,
    }
}

fn emit_csv<T: Serialize>(out: Option<&Path>, default_name: &str, rows: &[T]) -> Result<()> {
    match output_path(out, default_name) {
        Some(path) => {
            write_csv(&path, rows).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("wrote {}", path.display());
        }
        None => write_csv_to(std::io::stdout().lock(), rows)?,
    }
    Ok(())
}

fn read_document(path: &Path) -> Result<PolicyDocument> {
    PolicyDocument::read(path).with_context(|| format!("reading {}", path.display()))
}

fn cmd_solve(a: SolveArgs) -> CmdResult {
    let model = a.model.require()?;
    let sp = match a.mode {
        Mode::Average => SolveParams::average(&model),
        Mode::Discounted => SolveParams::discounted(&model, a.alpha),
    }
    .with_tol(a.tol)
    .with_max_iter(a.max_iter)
    .structured(a.structured);

    let started = std::time::Instant::now();
    let sol = solver::solve(&model, &sp).map_err(|e| anyhow!(e))?;
    let elapsed = started.elapsed();
    let r = &sol.report;

    println!("k: {}", model.k());
    println!("p: {:?}", model.p());
    println!("delta_max: {}", model.delta_max());
    println!("iterations: {}", r.iterations);
    println!("converged: {}", r.converged);
    match r.average_cost {
        Some(g) => println!("average_cost: {g:?}"),
        None => println!("average_cost: n/a"),
    }
    println!("argmin_evaluations: {}", r.argmin_evaluations);
    println!("seconds: {:.3}", elapsed.as_secs_f64());

    let default_name = format!("policy_k{}_p{}.json", model.k(), model.p());
    if let Some(path) = output_path(a.out.as_deref(), &default_name) {
        PolicyDocument::from_solution(&sol, &sp)
            .and_then(|doc| doc.write(&path))
            .with_context(|| format!("writing {}", path.display()))?;
        eprintln!("wrote {}", path.display());
    }
    if !r.converged {
        return Err(Failure::NonConvergence(anyhow!(
            "no convergence after {} iterations (last span {:e})",
            r.iterations,
            r.final_span
        )));
    }
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> CmdResult {
    let doc = read_document(&a.policy)?;
    let (values, policy) = doc.to_tables().context("policy document")?;
    let mut opts = VerifyOptions::for_model(&doc.model);
    opts.epsilon = a.epsilon;
    if let Some(margin) = a.margin {
        opts.margin = margin;
    }
    let reports = verify::check_all(&values, &policy, &opts);
    let mut stdout = std::io::stdout().lock();
    for r in &reports {
        let tag = match (r.holds(), r.property_id.is_informational()) {
            (true, _) => "PASS",
            (false, true) => "INFO",
            (false, false) => "FAIL",
        };
        let _ = writeln!(
            stdout,
            "{tag} {} checked={} violations={}",
            r.property_id,
            r.checked,
            r.violations.len()
        );
        for v in r.violations.iter().take(3) {
            let states: Vec<String> = v.states.iter().map(ToString::to_string).collect();
            let _ = writeln!(
                stdout,
                "    {} lhs={} rhs={} slack={:e}",
                states.join(" vs "),
                v.lhs,
                v.rhs,
                v.slack
            );
        }
    }
    if verify::all_hold(&reports) {
        Ok(())
    } else {
        Err(Failure::Violation(anyhow!("structural properties violated")))
    }
}

/// Parses `start:stop:step` into an ascending list, inclusive of `stop`.
fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = spec
        .split(':')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("bad grid {spec:?}"))?;
    let [start, stop, step] = parts[..] else {
        bail!("grid must be start:stop:step, got {spec:?}");
    };
    if !(step > 0.0) || stop < start {
        bail!("grid {spec:?} must have step > 0 and stop >= start");
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    // round to kill accumulated binary noise, e.g. 0.30000000000000004
    Ok((0..n)
        .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let grid = parse_grid(&a.p_grid)?;
    let mut rows = Vec::with_capacity(2 * grid.len());
    for &p in &grid {
        let model = build_model(a.k, p, a.delta_max)?;
        let sp = SolveParams::average(&model);
        let sol = solver::relative_vi(&model, &sp).with_context(|| format!("solving p={p}"))?;
        if !sol.report.converged {
            bail!("solver did not converge at p={p}");
        }
        let cfg = a.sim.config(&model);
        let mut results = Vec::new();
        for spec in [PolicySpec::OptimalTable(sol.policy.clone()), PolicySpec::Persistent] {
            let pi = spec.materialize(&model)?;
            let exact = solver::evaluate_policy_exact(&pi).with_context(|| format!("evaluating {} at p={p}", spec.name()))?;
            let simulated = sim::simulate(&spec, &model, &cfg).with_context(|| format!("simulating {} at p={p}", spec.name()))?;
            results.push((spec.name(), exact, simulated));
        }
        let gap = results[1].1 - results[0].1;
        for (name, exact, simulated) in results {
            rows.push(CompareRow {
                k: a.k,
                p,
                delta_max: model.delta_max(),
                policy: name.to_string(),
                avg_exact: exact,
                avg_sim: simulated.mean_aoi,
                stderr: simulated.stderr,
                gap,
            });
        }
        eprintln!("p={p}: gap {gap:.6}");
    }
    emit_csv(a.out.as_deref(), &format!("compare_k{}.csv", a.k), &rows)
}

fn cmd_thresholds(a: ThresholdArgs) -> CmdResult {
    let doc = read_document(&a.policy)?;
    let (_, policy) = doc.to_tables().context("policy document")?;
    let table = solver::extract_thresholds(&policy).map_err(|e| Failure::Violation(anyhow!(e)))?;
    let rows: Vec<ThresholdRow> = table
        .entries()
        .filter(|&(delta0, _, _)| a.delta0.map_or(true, |x| x == delta0))
        .map(|(delta0, d, tau)| ThresholdRow { delta0, d, tau })
        .collect();
    if let Some(delta0) = a.delta0 {
        if rows.is_empty() {
            return Err(Failure::Usage(anyhow!("no thresholds for delta0={delta0}")));
        }
    }
    emit_csv(a.out.as_deref(), "thresholds.csv", &rows)?;
    Ok(())
}

/// Resolves a policy argument to a model and policy specification.
fn resolve_policy(model_args: &ModelArgs, policy: &str) -> Result<(ModelParams, PolicySpec)> {
    match policy {
        "persistent" => Ok((model_args.require()?, PolicySpec::Persistent)),
        "optimal" => {
            let model = model_args.require()?;
            let sol = solver::relative_vi(&model, &SolveParams::average(&model))?;
            if !sol.report.converged {
                bail!("solver did not converge");
            }
            Ok((model, PolicySpec::OptimalTable(sol.policy)))
        }
        path => {
            let doc = read_document(Path::new(path))?;
            let m = doc.model;
            let mismatch = model_args.k.is_some_and(|k| k != m.k())
                || model_args.p.is_some_and(|p| p != m.p())
                || model_args.delta_max.is_some_and(|dm| dm != m.delta_max());
            if mismatch {
                bail!("--k/--p/--delta-max disagree with the model stored in {path}");
            }
            let (_, pi) = doc.to_tables()?;
            Ok((m, PolicySpec::OptimalTable(pi)))
        }
    }
}

fn cmd_trace(a: TraceArgs) -> Result<()> {
    let (model, spec) = resolve_policy(&a.model, &a.policy)?;
    let points = sim::trace(&spec, &model, a.slots, a.seed)?;
    let rows: Vec<TraceRow> = points.iter().map(TraceRow::from).collect();
    emit_csv(a.out.as_deref(), "trace.csv", &rows)
}

#[derive(Serialize)]
struct SimulateOutput<'a> {
    model: ModelParams,
    policy: &'a str,
    config: &'a SimConfig,
    #[serde(flatten)]
    result: &'a SimResult,
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let (model, spec) = resolve_policy(&a.model, &a.policy)?;
    let cfg = a.sim.config(&model);
    let result = sim::simulate(&spec, &model, &cfg)?;
    let out = SimulateOutput {
        model,
        policy: spec.name(),
        config: &cfg,
        result: &result,
    };
    println!("mean_aoi: {:?}", result.mean_aoi);
    println!("stderr: {:?}", result.stderr);
    println!("slots_simulated: {}", result.slots_simulated);
    println!("clamp_events: {}", result.clamp_events);
    if let Some(path) = output_path(a.out.as_deref(), "simulate.json") {
        write_atomic(&path, |w| -> Result<()> {
            serde_json::to_writer_pretty(&mut *w, &out)?;
            writeln!(w)?;
            Ok(())
        })
        .with_context(|| format!("writing {}", path.display()))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}
