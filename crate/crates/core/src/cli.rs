//! Config-driven experiment runner.
//!
//! A TOML file selects one task and its parameters; the runner writes CSV
//! tables plus `manifest.json` into the output directory. See the README for
//! the schema and the column layout of every CSV.

use crate::adjoint::adjoint_summary;
use crate::bsvie::{contraction_bound_sq, picard_solve, verify_contraction, SolverSettings};
use crate::control::{
    check_concavity, finite_difference_j, lq_benchmark, optimize_control, solve_pipeline, transversality_diagnostics, variation_derivative, LqOracle,
    OptimizationReport, OptimizerSettings,
};
use crate::drivers::{build_grid, sample_drivers, DriverPaths, MarkSpace, TimeGrid};
use crate::error::{Error, Result};
use crate::forward::simulate_forward;
use crate::models::{builtin, validate_model, ControlPolicy, InfoStructure, LqSettings, Model, Params};
use crate::par::mean_and_se;
use crate::paths::PathMatrix;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "FBSVIE_THREADS";

/// Tasks the runner can execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    SimulateForward,
    SolveBsvie,
    VerifyContraction,
    SolveAdjoint,
    GradCheck,
    Optimize,
    Transversality,
    Concavity,
    LqBenchmark,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub params: Params,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub t_max: f64,
    pub n_steps: i64,
    #[serde(default)]
    pub delay_steps: i64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarksConfig {
    #[serde(default)]
    pub marks: Vec<f64>,
    #[serde(default)]
    pub intensities: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub step: f64,
    pub iters: usize,
    pub tol: f64,
    pub min_step: f64,
    pub info: InfoStructure,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let o = OptimizerSettings::default();
        Self {
            step: o.step,
            iters: o.iters,
            tol: o.tol,
            min_step: o.min_step,
            info: InfoStructure::Full,
        }
    }
}

impl OptimizerConfig {
    pub fn settings(&self) -> OptimizerSettings {
        OptimizerSettings {
            step: self.step,
            iters: self.iters,
            tol: self.tol,
            min_step: self.min_step,
        }
    }
}

/// Constant control used by the non-optimizing tasks.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Probe pairs for contraction and concavity checks.
    pub probes: usize,
    /// Finite-difference step of the gradient check.
    pub eps: f64,
    /// Transversality checkpoints; empty means quarters of `t_max`.
    pub checkpoints: Vec<f64>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            probes: 20,
            eps: 1e-3,
            checkpoints: Vec::new(),
        }
    }
}

/// Full experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub model: ModelConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub marks: MarksConfig,
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }
}

/// Command-line overrides of config scalars.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.paths {
            cfg.n_paths = p;
        }
        if let Some(o) = &self.out {
            cfg.output = o.clone();
        }
    }
}

/// Validated inputs shared by all tasks.
struct Setup {
    model: Arc<dyn Model>,
    grid: TimeGrid,
    drivers: DriverPaths,
    control: ControlPolicy,
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    if cfg.n_paths == 0 {
        return Err(Error::validation("n_paths must be positive"));
    }
    let model = builtin(&cfg.model.name, &cfg.model.params)?;
    let grid = build_grid(cfg.grid.t_max, cfg.grid.n_steps, cfg.grid.delay_steps, cfg.grid.beta)?;
    let marks = MarkSpace::new(cfg.marks.marks.clone(), cfg.marks.intensities.clone())?;
    validate_model(model.as_ref(), &marks, Some(&grid), 32, cfg.seed).into_result()?;
    let drivers = sample_drivers(&grid, &marks, cfg.n_paths, cfg.seed)?;
    let control = ControlPolicy::constant(cfg.n_paths, &grid, cfg.control.value, InfoStructure::Full, &model.controls())?;
    Ok(Setup { model, grid, drivers, control })
}

/// Writes CSV tables into the output directory and records their names.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn table(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
        let mut w = csv::Writer::from_path(self.dir.join(name))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }
}

fn f(v: f64) -> String {
    v.to_string()
}

fn optimizer_rows(r: &OptimizationReport) -> Vec<Vec<String>> {
    r.sweeps
        .iter()
        .map(|s| vec![s.iteration.to_string(), f(s.j), f(s.se), f(s.stationarity), f(s.step), s.accepted.to_string()])
        .collect()
}

const OPTIMIZER_HEADER: [&str; 6] = ["iteration", "J", "se_J", "stationarity", "step", "accepted"];

fn policy_rows(grid: &TimeGrid, u: &PathMatrix) -> Vec<Vec<String>> {
    (0..=grid.n_steps() as isize)
        .map(|i| {
            let (m, se) = mean_and_se(&u.column(i));
            vec![f(grid.time(i)), f(m), f(se)]
        })
        .collect()
}

/// Outcome of one task: a JSON report and whether the numerics converged.
struct TaskResult {
    report: Value,
    failure: Option<Error>,
}

fn ok(report: Value) -> Result<TaskResult> {
    Ok(TaskResult { report, failure: None })
}

fn run_task(cfg: &ExperimentConfig, s: &Setup, out: &mut Outputs) -> Result<TaskResult> {
    let m = s.model.as_ref();
    let (grid, dr, u) = (&s.grid, &s.drivers, &s.control);
    match cfg.task {
        Task::SimulateForward => {
            let x = simulate_forward(m, grid, dr, u)?;
            let file = fs::File::create(out.dir.join("forward.csv"))?;
            x.write_csv(grid, std::io::BufWriter::new(file))?;
            out.files.push("forward.csv".into());
            out.table(
                "forward_summary.csv",
                &["t", "mean_X", "se_X"],
                (-(grid.delay_steps() as isize)..=grid.n_steps() as isize).map(|i| {
                    let (mean, se) = mean_and_se(&x.states().column(i));
                    vec![f(grid.time(i)), f(mean), f(se)]
                }),
            )?;
            ok(json!({ "max_abs_X": x.states().max_abs() }))
        }
        Task::SolveBsvie => {
            let x = simulate_forward(m, grid, dr, u)?;
            let bw = picard_solve(m, grid, dr, &x, u, &cfg.solver)?;
            out.table(
                "bsvie.csv",
                &["t", "mean_Y", "sd_Y"],
                bw.diagonal_summary().iter().enumerate().map(|(i, (mean, sd))| vec![f(grid.time(i as isize)), f(*mean), f(*sd)]),
            )?;
            let d = &bw.diagnostics;
            out.table(
                "bsvie_iterations.csv",
                &["iteration", "distance", "squared_ratio"],
                d.distances
                    .iter()
                    .enumerate()
                    .map(|(i, dist)| vec![(i + 1).to_string(), f(*dist), if i == 0 { String::new() } else { f(d.ratios.get(i - 1).copied().unwrap_or(f64::NAN)) }]),
            )?;
            let failure = (!d.converged).then(|| Error::NonConvergence(format!("Picard iteration did not reach tol after {} iterations", d.iterations)));
            Ok(TaskResult {
                report: json!({ "diagnostics": d, "y0_mean": bw.diagonal_summary()[0].0 }),
                failure,
            })
        }
        Task::VerifyContraction => {
            let x = simulate_forward(m, grid, dr, u)?;
            let rep = verify_contraction(m, grid, dr, &x, u, &cfg.solver, cfg.diagnostics.probes, cfg.seed)?;
            out.table(
                "contraction.csv",
                &["probe", "squared_ratio"],
                rep.ratios.iter().enumerate().map(|(i, r)| vec![i.to_string(), f(*r)]),
            )?;
            ok(serde_json::to_value(&rep).map_err(json_err)?)
        }
        Task::SolveAdjoint => {
            let pipe = solve_pipeline(m, grid, dr, u, &cfg.solver)?;
            let pb = pipe.problem(m, grid, dr, u);
            let summary = adjoint_summary(&pb, &pipe.adjoint);
            out.table(
                "adjoint.csv",
                &["t", "mean_lambda", "mean_p", "q_rms", "r_rms"],
                summary.iter().enumerate().map(|(i, r)| {
                    let mut row = vec![f(grid.time(i as isize))];
                    row.extend(r.iter().map(|v| f(*v)));
                    row
                }),
            )?;
            ok(json!({
                "J": pipe.eval.j,
                "sweeps": pipe.adjoint.sweeps,
                "sweep_distances": pipe.adjoint.sweep_distances,
                "dropped_marks": pipe.adjoint.lambda.dropped_marks,
                "bsvie": pipe.eval.backward.diagnostics,
            }))
        }
        Task::GradCheck => {
            let pipe = solve_pipeline(m, grid, dr, u, &cfg.solver)?;
            let np = dr.n_paths();
            let n = grid.n_steps();
            let directions = [
                ("constant", PathMatrix::filled(np, 0, n as isize, 1.0)),
                (
                    "sine",
                    PathMatrix::from_rows(0, (0..np).map(|_| (0..=n).map(|i| grid.time(i as isize).sin()).collect()).collect())?,
                ),
                ("state", PathMatrix::from_rows(0, (0..np).map(|p| (0..=n).map(|i| pipe.eval.state.x(p, i)).collect()).collect())?),
            ];
            let tol = 1e-2 * pipe.eval.j.value.abs().max(1.0);
            let mut rows = Vec::new();
            let mut all = true;
            for (name, beta) in &directions {
                let an = variation_derivative(&pipe, grid, beta)?;
                let fd = finite_difference_j(m, grid, dr, u, beta, cfg.diagnostics.eps, &cfg.solver)?;
                let err = (an.value - fd).abs();
                all &= err <= tol;
                rows.push(vec![name.to_string(), f(an.value), f(an.se), f(fd), f(err), f(tol), (err <= tol).to_string()]);
            }
            out.table("gradcheck.csv", &["direction", "analytic", "analytic_se", "finite_difference", "abs_error", "tolerance", "pass"], rows)?;
            ok(json!({ "J": pipe.eval.j, "all_pass": all }))
        }
        Task::Optimize => {
            let (pol, rep) = optimize_control(m, grid, dr, u, cfg.optimizer.info, &cfg.optimizer.settings(), &cfg.solver)?;
            out.table("optimizer.csv", &OPTIMIZER_HEADER, optimizer_rows(&rep))?;
            out.table("policy.csv", &["t", "mean_u", "se_u"], policy_rows(grid, pol.values()))?;
            let failure = rep.aborted.then(|| Error::NonConvergence("optimizer step fell below its floor".into()));
            Ok(TaskResult {
                report: serde_json::to_value(&rep).map_err(json_err)?,
                failure,
            })
        }
        Task::Transversality => {
            let (hat_u, source) = if cfg.model.name == "lq" {
                let oracle = LqOracle::new(LqSettings::from_params(&cfg.model.params)?);
                (oracle.simulate(m, grid, dr)?.1, "riccati")
            } else {
                let (pol, _) = optimize_control(m, grid, dr, u, cfg.optimizer.info, &cfg.optimizer.settings(), &cfg.solver)?;
                (pol, "optimized")
            };
            let hat = solve_pipeline(m, grid, dr, &hat_u, &cfg.solver)?;
            let other = solve_pipeline(m, grid, dr, u, &cfg.solver)?;
            let cps = if cfg.diagnostics.checkpoints.is_empty() {
                (1..=4).map(|q| grid.t_max() * q as f64 / 4.0).collect()
            } else {
                cfg.diagnostics.checkpoints.clone()
            };
            let rep = transversality_diagnostics(
                grid,
                (&hat.eval.state, &hat.eval.backward, &hat.adjoint),
                (&other.eval.state, &other.eval.backward),
                &cps,
            )?;
            out.table(
                "transversality.csv",
                &["T", "lambda_term", "lambda_se", "p_term", "p_se"],
                rep.rows
                    .iter()
                    .map(|r| vec![f(r.t), f(r.lambda_term.value), f(r.lambda_term.se), f(r.p_term.value), f(r.p_term.se)]),
            )?;
            ok(json!({ "candidate": source, "report": rep }))
        }
        Task::Concavity => {
            let rep = check_concavity(m, dr.marks(), grid, cfg.diagnostics.probes, cfg.seed);
            out.table(
                "concavity.csv",
                &["probes", "terminal_violations", "hamiltonian_violations", "worst_excess", "pass"],
                [vec![rep.probes.to_string(), rep.terminal_violations.to_string(), rep.hamiltonian_violations.to_string(), f(rep.worst), rep.passed().to_string()]],
            )?;
            ok(serde_json::to_value(&rep).map_err(json_err)?)
        }
        Task::LqBenchmark => {
            if cfg.model.name != "lq" {
                return Err(Error::validation("lq-benchmark requires model 'lq'"));
            }
            let settings = LqSettings::from_params(&cfg.model.params)?;
            let (pol, _, b) = lq_benchmark(m, settings, grid, dr, &cfg.optimizer.settings(), &cfg.solver)?;
            out.table("optimizer.csv", &OPTIMIZER_HEADER, optimizer_rows(&b.report))?;
            out.table("policy.csv", &["t", "mean_u", "se_u"], policy_rows(grid, pol.values()))?;
            out.table(
                "lq_benchmark.csv",
                &["metric", "value"],
                [
                    ("riccati", b.oracle.riccati),
                    ("gain", b.oracle.gain),
                    ("oracle_value", b.oracle_value),
                    ("infinite_horizon_value", b.infinite_horizon_value),
                    ("optimized_J", b.optimized_j.value),
                    ("optimized_J_se", b.optimized_j.se),
                    ("policy_error_pct", b.policy_error_pct),
                    ("stationary_policy_error_pct", b.stationary_policy_error_pct),
                    ("J_error_pct", b.j_error_pct),
                    ("stationarity_ratio", b.stationarity_ratio),
                ]
                .iter()
                .map(|(k, v)| vec![k.to_string(), f(*v)]),
            )?;
            ok(serde_json::to_value(&b).map_err(json_err)?)
        }
    }
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Config(format!("serialization failed: {e}"))
}

/// Files written by a run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output: PathBuf,
    pub files: Vec<String>,
    pub manifest: Value,
}

/// Executes the configured task and writes its artifacts. A numerical
/// failure still writes the tables and manifest before returning the error.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let start = Instant::now();
    let s = setup(cfg)?;
    fs::create_dir_all(&cfg.output)?;
    let mut out = Outputs {
        dir: cfg.output.clone(),
        files: Vec::new(),
    };
    let lipschitz = s.model.lipschitz();
    let (bound, non_contractive) = contraction_bound_sq(lipschitz, s.grid.beta())?;
    let mut warnings = Vec::new();
    if non_contractive {
        warnings.push(format!("beta = {} does not exceed 6 L^2 = {}", s.grid.beta(), 6.0 * lipschitz * lipschitz));
    }
    let result = run_task(cfg, &s, &mut out)?;
    let manifest = json!({
        "task": cfg.task,
        "status": match &result.failure { None => "ok".to_string(), Some(e) => e.kind().to_string() },
        "config": cfg,
        "seed": cfg.seed,
        "n_paths": cfg.n_paths,
        "versions": { "fbsvie-lab": env!("CARGO_PKG_VERSION") },
        "threads": rayon::current_num_threads(),
        "wall_time_s": start.elapsed().as_secs_f64(),
        "contraction_bound": bound,
        "lipschitz": lipschitz,
        "non_contractive": non_contractive,
        "warnings": warnings,
        "outputs": out.files,
        "report": result.report,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(json_err)?;
    fs::write(cfg.output.join("manifest.json"), text)?;
    if let Some(e) = result.failure {
        return Err(e);
    }
    Ok(RunSummary {
        output: cfg.output.clone(),
        files: out.files,
        manifest,
    })
}

#[derive(Debug, Parser)]
#[command(name = "fbsvie-lab", version, about = "Monte Carlo laboratory for forward-backward stochastic Volterra systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the task described by a TOML config.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Machine-readable error document printed on stderr.
pub fn error_json(e: &Error) -> Value {
    json!({ "error": { "kind": e.kind(), "message": e.to_string(), "exit_code": e.exit_code() } })
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
        if n == 0 {
            return Err(Error::Config(format!("{THREADS_ENV} must be positive")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = configure_threads().and_then(|_| match cli.command {
        Command::Run { config, seed, paths, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            Overrides { seed, paths, out }.apply(&mut cfg);
            run(&cfg)
        }
    });
    match outcome {
        Ok(summary) => {
            println!("{}", json!({ "status": "ok", "output": summary.output, "files": summary.files }));
            0
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            e.exit_code()
        }
    }
}
