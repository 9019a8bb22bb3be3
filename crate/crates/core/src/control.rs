//! Performance functional, information projection, first-variation gradient,
//! conditional-gradient optimizer, transversality and concavity diagnostics,
//! and the closed-form discounted LQ benchmark.

use crate::adjoint::{eval_h0, solve_adjoint, AdjointProblem, AdjointSolution, HArgs};
use crate::bsvie::{picard_solve, BackwardSolution, SolverSettings};
use crate::drivers::{process_norm_sq, DriverPaths, MarkSpace, TimeGrid};
use crate::error::{Error, Result};
use crate::forward::{simulate_feedback, simulate_forward, ForwardEnsemble};
use crate::models::{ControlPolicy, InfoStructure, KernelPoint, LqSettings, Model};
use crate::par::mean_and_se;
use crate::paths::PathMatrix;
use crate::regression::{Regressor, MAX_BASIS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

/// Forward state, backward solution and `J` at one control.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub state: ForwardEnsemble,
    pub backward: BackwardSolution,
    pub j: Estimate,
}

/// `Evaluation` plus the adjoint system.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub eval: Evaluation,
    pub adjoint: AdjointSolution,
}

impl Pipeline {
    pub fn problem<'a>(&'a self, m: &'a dyn Model, grid: &'a TimeGrid, drivers: &'a DriverPaths, u: &'a ControlPolicy) -> AdjointProblem<'a> {
        AdjointProblem {
            model: m,
            grid,
            drivers,
            state: &self.eval.state,
            control: u,
            backward: &self.eval.backward,
        }
    }

    /// Adapted `dH/du`, steps `0..=n` with zeros at `n`.
    pub fn h_u(&self) -> &PathMatrix {
        &self.adjoint.pqr.h_u
    }
}

/// Per-path `sum_i f(t_i, X_i, X1_i, Y_i, u_i) dt + h(Y_0)`.
pub fn performance(m: &dyn Model, grid: &TimeGrid, state: &ForwardEnsemble, backward: &BackwardSolution, u: &ControlPolicy) -> Estimate {
    let n = grid.n_steps();
    let dt = grid.dt();
    let per_path: Vec<f64> = (0..state.n_paths())
        .map(|p| {
            let mut s = 0.0;
            for i in 0..n {
                s += m.running(grid.time(i as isize), state.x(p, i), state.x1(p, i), backward.y.get(p, i as isize), u.get(p, i)).value * dt;
            }
            s + m.terminal(backward.y.get(p, 0)).0
        })
        .collect();
    let (value, se) = mean_and_se(&per_path);
    Estimate { value, se }
}

/// Runs the forward and backward solvers and evaluates `J`.
pub fn evaluate(m: &dyn Model, grid: &TimeGrid, drivers: &DriverPaths, u: &ControlPolicy, solver: &SolverSettings) -> Result<Evaluation> {
    let state = simulate_forward(m, grid, drivers, u)?;
    let backward = picard_solve(m, grid, drivers, &state, u, solver)?;
    let j = performance(m, grid, &state, &backward, u);
    Ok(Evaluation { state, backward, j })
}

/// Performance functional `J(u)` with its standard error.
pub fn evaluate_j(m: &dyn Model, grid: &TimeGrid, drivers: &DriverPaths, u: &ControlPolicy, solver: &SolverSettings) -> Result<Estimate> {
    Ok(evaluate(m, grid, drivers, u, solver)?.j)
}

/// Completes an evaluation with the adjoint system.
pub fn with_adjoint(m: &dyn Model, grid: &TimeGrid, drivers: &DriverPaths, u: &ControlPolicy, eval: Evaluation) -> Result<Pipeline> {
    let adjoint = solve_adjoint(&AdjointProblem {
        model: m,
        grid,
        drivers,
        state: &eval.state,
        control: u,
        backward: &eval.backward,
    })?;
    Ok(Pipeline { eval, adjoint })
}

/// Forward, backward and adjoint solutions at `u`.
pub fn solve_pipeline(m: &dyn Model, grid: &TimeGrid, drivers: &DriverPaths, u: &ControlPolicy, solver: &SolverSettings) -> Result<Pipeline> {
    let eval = evaluate(m, grid, drivers, u, solver)?;
    with_adjoint(m, grid, drivers, u, eval)
}

/// Conditional expectation given the controller's information, step by step.
///
/// `Full` returns the input, `Trivial` the cross-path mean, and `Delayed`
/// the regression at step `i - lag` on the state (the path mean before `lag`).
pub fn project_onto_info(values: &PathMatrix, info: InfoStructure, grid: &TimeGrid, state: &ForwardEnsemble, degree: usize) -> Result<PathMatrix> {
    if values.n_paths() != state.n_paths() {
        return Err(Error::validation("values and state differ in path count"));
    }
    match info {
        InfoStructure::Full => Ok(values.clone()),
        InfoStructure::Trivial => {
            let mut out = values.clone();
            for i in values.first_step()..=values.last_step() {
                let col = values.column(i);
                if col.iter().all(|v| *v == col[0]) {
                    continue;
                }
                let mean = mean_and_se(&col).0;
                out.set_column(i, &vec![mean; col.len()]);
            }
            Ok(out)
        }
        InfoStructure::Delayed { .. } => {
            let lag = info.lag_steps(grid)?;
            let reg = Regressor::fit(state.states(), grid, degree);
            let n = grid.n_steps() as isize;
            let mut out = values.clone();
            for i in values.first_step()..=values.last_step() {
                let col = values.column(i);
                let s = i - lag as isize;
                if s < 0 || s >= n {
                    let mean = mean_and_se(&col).0;
                    if col.iter().any(|v| *v != col[0]) {
                        out.set_column(i, &vec![mean; col.len()]);
                    }
                    continue;
                }
                let s = s as usize;
                let c = reg.project(s, state.states(), &col);
                let nb = reg.len(s);
                let mut f = [0.0; MAX_BASIS];
                let proj: Vec<f64> = (0..col.len())
                    .map(|p| {
                        reg.path_features(s, state.states(), p, &mut f[..nb]);
                        Regressor::eval(&c, &f[..nb])
                    })
                    .collect();
                out.set_column(i, &proj);
            }
            Ok(out)
        }
    }
}

/// `E[sum_i dH/du(t_i) beta_i dt]` from a solved pipeline.
pub fn variation_derivative(pipeline: &Pipeline, grid: &TimeGrid, beta: &PathMatrix) -> Result<Estimate> {
    let h_u = pipeline.h_u();
    if beta.n_paths() != h_u.n_paths() || beta.first_step() > 0 || beta.last_step() < grid.n_steps() as isize - 1 {
        return Err(Error::validation("direction does not cover the grid and paths"));
    }
    let dt = grid.dt();
    let per_path: Vec<f64> = (0..h_u.n_paths())
        .map(|p| (0..grid.n_steps() as isize).map(|i| h_u.get(p, i) * beta.get(p, i) * dt).sum())
        .collect();
    let (value, se) = mean_and_se(&per_path);
    Ok(Estimate { value, se })
}

/// Central difference `(J(u + eps beta) - J(u - eps beta)) / (2 eps)` on shared drivers.
pub fn finite_difference_j(m: &dyn Model, grid: &TimeGrid, drivers: &DriverPaths, u: &ControlPolicy, beta: &PathMatrix, eps: f64, solver: &SolverSettings) -> Result<f64> {
    let set = m.controls();
    let shifted = |sign: f64| -> Result<ControlPolicy> { ControlPolicy::new(u.values().zip_map(beta, |a, b| a + sign * eps * b)?, u.info(), &set) };
    let up = evaluate_j(m, grid, drivers, &shifted(1.0)?, solver)?.value;
    let dn = evaluate_j(m, grid, drivers, &shifted(-1.0)?, solver)?.value;
    Ok((up - dn) / (2.0 * eps))
}

/// Optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSettings {
    pub step: f64,
    pub iters: usize,
    /// Absolute stationarity tolerance.
    pub tol: f64,
    pub min_step: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            step: 1.0,
            iters: 50,
            tol: 1e-8,
            min_step: 1e-6,
        }
    }
}

/// One optimizer sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRecord {
    pub iteration: usize,
    pub j: f64,
    pub se: f64,
    /// Weighted norm of the projected gradient at the trial control.
    pub stationarity: f64,
    pub step: f64,
    pub accepted: bool,
}

/// Optimizer history and outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizationReport {
    pub sweeps: Vec<SweepRecord>,
    pub initial_stationarity: f64,
    pub final_stationarity: f64,
    pub final_j: Estimate,
    pub converged: bool,
    /// The step fell below its floor.
    pub aborted: bool,
}

/// Weighted norm `sqrt(E sum_i e^{beta t_i} v_i^2 dt)`.
pub fn stationarity_norm(v: &PathMatrix, grid: &TimeGrid) -> f64 {
    process_norm_sq(v, grid).sqrt()
}

/// Projected conditional-gradient ascent
/// `u <- clip_U(u + step * E[dH/du | G])`. A trial that lowers `J` is rejected
/// and the step halved; below `min_step` the run aborts with its report.
pub fn optimize_control(
    m: &dyn Model,
    grid: &TimeGrid,
    drivers: &DriverPaths,
    u0: &ControlPolicy,
    info: InfoStructure,
    settings: &OptimizerSettings,
    solver: &SolverSettings,
) -> Result<(ControlPolicy, OptimizationReport)> {
    if !(settings.step > 0.0 && settings.min_step > 0.0) {
        return Err(Error::validation("optimizer step and step floor must be positive"));
    }
    let set = m.controls();
    let mut u = ControlPolicy::new(u0.values().clone(), info, &set)?;
    let gradient = |u: &ControlPolicy, eval: Evaluation| -> Result<(PathMatrix, Estimate)> {
        let j = eval.j;
        let pipe = with_adjoint(m, grid, drivers, u, eval)?;
        let g = project_onto_info(pipe.h_u(), info, grid, &pipe.eval.state, solver.degree)?;
        Ok((g, j))
    };
    let (mut g, mut j) = gradient(&u, evaluate(m, grid, drivers, &u, solver)?)?;
    let s0 = stationarity_norm(&g, grid);
    let mut report = OptimizationReport {
        sweeps: vec![SweepRecord {
            iteration: 0,
            j: j.value,
            se: j.se,
            stationarity: s0,
            step: settings.step,
            accepted: true,
        }],
        initial_stationarity: s0,
        final_stationarity: s0,
        final_j: j,
        converged: s0 <= settings.tol,
        aborted: false,
    };
    let mut step = settings.step;
    for it in 1..=settings.iters {
        if report.converged {
            break;
        }
        let trial_vals = u.values().zip_map(&g, |a, d| set.clip(a + step * d))?;
        let trial = ControlPolicy::new(trial_vals, info, &set)?;
        let eval = evaluate(m, grid, drivers, &trial, solver)?;
        if eval.j.value >= j.value {
            let (g2, j2) = gradient(&trial, eval)?;
            let s = stationarity_norm(&g2, grid);
            u = trial;
            g = g2;
            j = j2;
            report.final_stationarity = s;
            report.final_j = j;
            report.converged = s <= settings.tol;
            report.sweeps.push(SweepRecord {
                iteration: it,
                j: j.value,
                se: j.se,
                stationarity: s,
                step,
                accepted: true,
            });
            log::info!("sweep {it}: J = {:.8} stationarity = {s:.3e}", j.value);
        } else {
            report.sweeps.push(SweepRecord {
                iteration: it,
                j: eval.j.value,
                se: eval.j.se,
                stationarity: f64::NAN,
                step,
                accepted: false,
            });
            step /= 2.0;
            if step < settings.min_step {
                log::warn!("optimizer step fell below {:e}", settings.min_step);
                report.aborted = true;
                break;
            }
        }
    }
    Ok((u, report))
}

/// One transversality checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransversalityRow {
    pub t: f64,
    /// `E[lambda_hat(T) (Y_hat(T) - Y(T))]`.
    pub lambda_term: Estimate,
    /// `E[p_hat(T) (X_hat(T) - X(T))]`.
    pub p_term: Estimate,
}

/// Transversality table with trend flags over the last three checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransversalityReport {
    pub rows: Vec<TransversalityRow>,
    /// Max of the `lambda` term over the last three checkpoints is at least
    /// minus two standard errors.
    pub lambda_sign_consistent: bool,
    /// `|p term|` strictly decreases over the last three checkpoints.
    pub p_decaying: bool,
}

/// Compares the candidate `(X_hat, Y_hat)` with adjoints against another
/// controlled system solved on the same drivers.
pub fn transversality_diagnostics(
    grid: &TimeGrid,
    hat: (&ForwardEnsemble, &BackwardSolution, &AdjointSolution),
    other: (&ForwardEnsemble, &BackwardSolution),
    checkpoints: &[f64],
) -> Result<TransversalityReport> {
    let (xh, yh, adj) = hat;
    let (xo, yo) = other;
    let np = xh.n_paths();
    if xo.n_paths() != np {
        return Err(Error::validation("systems differ in path count"));
    }
    let n = grid.n_steps();
    let mut rows = Vec::with_capacity(checkpoints.len());
    for &t in checkpoints {
        if !(0.0..=grid.t_max() + 1e-12).contains(&t) {
            return Err(Error::validation(format!("checkpoint {t} outside [0, t_max]")));
        }
        let i = grid.index_of(t).min(n);
        let lam: Vec<f64> = (0..np).map(|p| adj.lambda.lambda.get(p, i as isize) * (yh.y.get(p, i as isize) - yo.y.get(p, i as isize))).collect();
        let pv: Vec<f64> = (0..np).map(|p| adj.pqr.p.get(p, i as isize) * (xh.x(p, i) - xo.x(p, i))).collect();
        let (lv, ls) = mean_and_se(&lam);
        let (pm, ps) = mean_and_se(&pv);
        rows.push(TransversalityRow {
            t: grid.time(i as isize),
            lambda_term: Estimate { value: lv, se: ls },
            p_term: Estimate { value: pm, se: ps },
        });
    }
    let tail = &rows[rows.len().saturating_sub(3)..];
    let lambda_sign_consistent = tail.iter().map(|r| r.lambda_term.value + 2.0 * r.lambda_term.se).fold(f64::NEG_INFINITY, f64::max) >= 0.0 || tail.is_empty();
    let p_decaying = tail.len() == 3 && tail.windows(2).all(|w| w[1].p_term.value.abs() < w[0].p_term.value.abs());
    Ok(TransversalityReport {
        rows,
        lambda_sign_consistent,
        p_decaying,
    })
}

/// Midpoint-secant concavity probes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcavityReport {
    pub probes: usize,
    pub terminal_violations: usize,
    pub hamiltonian_violations: usize,
    /// Largest secant excess found.
    pub worst: f64,
}

impl ConcavityReport {
    pub fn passed(&self) -> bool {
        self.terminal_violations == 0 && self.hamiltonian_violations == 0
    }
}

/// Tests `H(mid) >= (H(a) + H(b)) / 2 - tol` over random argument pairs at
/// random adjoint values, and the same for `h`. `H` here is the diagonal part
/// plus the forward-kernel memory terms against a random future `p` row.
pub fn check_concavity(m: &dyn Model, marks: &MarkSpace, grid: &TimeGrid, probes: usize, seed: u64) -> ConcavityReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nm = marks.len();
    let set = m.controls();
    let (ulo, uhi) = (set.lo.max(-2.0), set.hi.min(2.0));
    let n = grid.n_steps();
    let horizon = 16.min(n);
    let mut report = ConcavityReport {
        probes,
        terminal_violations: 0,
        hamiltonian_violations: 0,
        worst: 0.0,
    };
    let tol = |v: f64| 1e-9 * v.abs().max(1.0);
    for _ in 0..probes {
        let draw = |rng: &mut ChaCha8Rng| HArgs {
            x: rng.random_range(-2.0..2.0),
            x1: rng.random_range(-2.0..2.0),
            y: rng.random_range(-2.0..2.0),
            z: rng.random_range(-2.0..2.0),
            k: (0..nm).map(|_| rng.random_range(-1.0..1.0)).collect(),
            u: if uhi > ulo { rng.random_range(ulo..uhi) } else { ulo },
        };
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let mid = HArgs {
            x: 0.5 * (a.x + b.x),
            x1: 0.5 * (a.x1 + b.x1),
            y: 0.5 * (a.y + b.y),
            z: 0.5 * (a.z + b.z),
            k: a.k.iter().zip(&b.k).map(|(p, q)| 0.5 * (p + q)).collect(),
            u: 0.5 * (a.u + b.u),
        };
        let i = rng.random_range(0..n);
        let t = grid.time(i as isize);
        let lam: f64 = rng.random_range(-1.0..1.0);
        let p: f64 = rng.random_range(-1.0..1.0);
        let q: f64 = rng.random_range(-1.0..1.0);
        let r: Vec<f64> = (0..nm).map(|_| rng.random_range(-1.0..1.0)).collect();
        let future: Vec<f64> = (0..horizon.min(n - i)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = |args: &HArgs| {
            let mut v = eval_h0(m, marks, t, args, lam, p, q, &r).0;
            let s = grid.time(i as isize);
            for (j, pm) in future.iter().enumerate() {
                let at = |tt: f64| KernelPoint {
                    t: tt,
                    s,
                    x: args.x,
                    x1: args.x1,
                    u: args.u,
                };
                let mm = (i + j) as isize;
                v += (m.drift(&at(grid.time(mm + 1))).value - m.drift(&at(grid.time(mm))).value) * pm;
            }
            v
        };
        let (ha, hb, hm) = (h(&a), h(&b), h(&mid));
        let excess = 0.5 * (ha + hb) - hm;
        if excess > tol(hm) {
            report.hamiltonian_violations += 1;
        }
        report.worst = report.worst.max(excess);
        let (ya, yb) = (a.y, b.y);
        let (ta, tb, tm) = (m.terminal(ya).0, m.terminal(yb).0, m.terminal(0.5 * (ya + yb)).0);
        let excess = 0.5 * (ta + tb) - tm;
        if excess > tol(tm) {
            report.terminal_violations += 1;
        }
        report.worst = report.worst.max(excess);
    }
    report
}

/// Closed-form discounted LQ regulator: `P^2 + kappa (rho - 2a) P - kappa = 0`,
/// optimal feedback `u = -(P / kappa) x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LqOracle {
    pub settings: LqSettings,
    pub riccati: f64,
    pub gain: f64,
}

impl LqOracle {
    pub fn new(settings: LqSettings) -> Self {
        let b = settings.kappa * (settings.rho - 2.0 * settings.a);
        let riccati = 0.5 * (-b + (b * b + 4.0 * settings.kappa).sqrt());
        Self {
            settings,
            riccati,
            gain: riccati / settings.kappa,
        }
    }

    pub fn feedback(&self, x: f64) -> f64 {
        -self.gain * x
    }

    /// Infinite-horizon value `-P (x0^2 + sigma^2 / rho) / 2`.
    pub fn value_infinite(&self) -> f64 {
        let s = &self.settings;
        -0.5 * self.riccati * (s.x0 * s.x0 + s.sigma * s.sigma / s.rho)
    }

    /// Value of the linear feedback `u = -gain x` over `[0, horizon]`.
    pub fn value(&self, gain: f64, horizon: f64) -> f64 {
        let s = &self.settings;
        let c = 2.0 * (s.a - gain);
        let w = 0.5 * (1.0 + s.kappa * gain * gain);
        let x2 = s.x0 * s.x0;
        let s2 = s.sigma * s.sigma;
        let rho = s.rho;
        let disc = |r: f64| if r.abs() < 1e-12 { horizon } else { (1.0 - (-r * horizon).exp()) / r };
        let second_moment = if c.abs() < 1e-12 {
            x2 * disc(rho) + s2 * (disc(rho) - horizon * (-rho * horizon).exp()) / rho
        } else {
            let m_inf = -s2 / c;
            m_inf * disc(rho) + (x2 - m_inf) * disc(rho - c)
        };
        -w * second_moment
    }

    /// Value of the optimal feedback over `[0, horizon]`.
    pub fn value_truncated(&self, horizon: f64) -> f64 {
        self.value(self.gain, horizon)
    }

    /// Optimal gains on `[0, horizon]` with zero terminal weight, sampled at
    /// the grid times, and the optimal value. Integrates
    /// `P' = (rho - 2a) P + P^2 / kappa - 1`, `c' = rho c - sigma^2 P / 2`
    /// backward from zero with RK4 on `substeps` per grid step.
    pub fn finite_horizon(&self, grid: &TimeGrid, substeps: usize) -> (Vec<f64>, f64) {
        let s = &self.settings;
        let n = grid.n_steps();
        let h = grid.dt() / substeps.max(1) as f64;
        let rhs = |v: [f64; 2]| -> [f64; 2] {
            [
                (s.rho - 2.0 * s.a) * v[0] + v[0] * v[0] / s.kappa - 1.0,
                s.rho * v[1] - 0.5 * s.sigma * s.sigma * v[0],
            ]
        };
        let mut v = [0.0, 0.0];
        let mut gains = vec![0.0; n + 1];
        for k in (0..n).rev() {
            for _ in 0..substeps.max(1) {
                let step = |a: [f64; 2], d: [f64; 2], c: f64| [a[0] - c * d[0], a[1] - c * d[1]];
                let k1 = rhs(v);
                let k2 = rhs(step(v, k1, 0.5 * h));
                let k3 = rhs(step(v, k2, 0.5 * h));
                let k4 = rhs(step(v, k3, h));
                v[0] -= h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]);
                v[1] -= h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]);
            }
            gains[k] = v[0] / s.kappa;
        }
        (gains, -0.5 * v[0] * s.x0 * s.x0 - v[1])
    }

    /// Optimal gains of the Euler-discretized problem on `grid`, from the
    /// backward Riccati recursion with zero terminal weight.
    pub fn discrete_gains(&self, grid: &TimeGrid) -> Vec<f64> {
        let s = &self.settings;
        let n = grid.n_steps();
        let dt = grid.dt();
        let delta = (-s.rho * dt).exp();
        let alpha = 1.0 + s.a * dt;
        let mut gains = vec![0.0; n + 1];
        let mut next = 0.0;
        for k in (0..n).rev() {
            let w = delta * next;
            gains[k] = w * alpha / (s.kappa + w * dt);
            next = dt + w * alpha * alpha - w * w * alpha * alpha * dt / (s.kappa + w * dt);
        }
        gains
    }

    /// Exact value of the linear feedbacks `u_k = -gains[k] x` for the
    /// Euler-discretized problem.
    pub fn discrete_value(&self, grid: &TimeGrid, gains: &[f64]) -> f64 {
        let s = &self.settings;
        let dt = grid.dt();
        let alpha = 1.0 + s.a * dt;
        let mut moment = s.x0 * s.x0;
        let mut total = 0.0;
        for (k, g) in gains.iter().take(grid.n_steps()).enumerate() {
            total -= 0.5 * (-s.rho * grid.time(k as isize)).exp() * (1.0 + s.kappa * g * g) * moment * dt;
            moment = (alpha - g * dt).powi(2) * moment + s.sigma * s.sigma * dt;
        }
        total
    }

    /// Weighted relative distance of `u` from the feedbacks `-gains[k] X`.
    pub fn policy_error_with(&self, grid: &TimeGrid, state: &ForwardEnsemble, u: &ControlPolicy, gains: &[f64]) -> f64 {
        let np = state.n_paths();
        let n = grid.n_steps();
        let mut diff = PathMatrix::zeros(np, 0, n as isize);
        let mut target = PathMatrix::zeros(np, 0, n as isize);
        for p in 0..np {
            for i in 0..=n {
                let f = -gains[i] * state.x(p, i);
                target.set(p, i as isize, f);
                diff.set(p, i as isize, u.get(p, i) - f);
            }
        }
        (process_norm_sq(&diff, grid) / process_norm_sq(&target, grid)).sqrt()
    }

    /// Simulates the Riccati feedback on the given drivers.
    pub fn simulate(&self, m: &dyn Model, grid: &TimeGrid, drivers: &DriverPaths) -> Result<(ForwardEnsemble, ControlPolicy)> {
        let (x, u) = simulate_feedback(m, grid, drivers, |_, x, _| self.feedback(x))?;
        Ok((x, ControlPolicy::new(u, InfoStructure::Full, &m.controls())?))
    }

    /// Weighted relative distance of `u` from the feedback `-gain X` along `state`.
    pub fn policy_error(&self, grid: &TimeGrid, state: &ForwardEnsemble, u: &ControlPolicy) -> f64 {
        self.policy_error_with(grid, state, u, &vec![self.gain; grid.n_steps() + 1])
    }
}

/// Outcome of the LQ benchmark.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LqBenchmark {
    pub oracle: LqOracle,
    /// Optimal value on `[0, t_max]` with zero terminal weight.
    pub oracle_value: f64,
    pub infinite_horizon_value: f64,
    pub optimized_j: Estimate,
    /// Against the finite-horizon Riccati feedback.
    pub policy_error_pct: f64,
    /// Against the stationary feedback `-P x / kappa` on the whole grid.
    pub stationary_policy_error_pct: f64,
    pub j_error_pct: f64,
    pub stationarity_ratio: f64,
    pub report: OptimizationReport,
}

/// Optimizes from `u = 0` under full information and compares with the oracle.
pub fn lq_benchmark(
    m: &dyn Model,
    settings: LqSettings,
    grid: &TimeGrid,
    drivers: &DriverPaths,
    opt: &OptimizerSettings,
    solver: &SolverSettings,
) -> Result<(ControlPolicy, ForwardEnsemble, LqBenchmark)> {
    let oracle = LqOracle::new(settings);
    let u0 = ControlPolicy::constant(drivers.n_paths(), grid, 0.0, InfoStructure::Full, &m.controls())?;
    let (u, report) = optimize_control(m, grid, drivers, &u0, InfoStructure::Full, opt, solver)?;
    let state = simulate_forward(m, grid, drivers, &u)?;
    let (gains, oracle_value) = oracle.finite_horizon(grid, 10);
    let bench = LqBenchmark {
        oracle,
        oracle_value,
        infinite_horizon_value: oracle.value_infinite(),
        optimized_j: report.final_j,
        policy_error_pct: 100.0 * oracle.policy_error_with(grid, &state, &u, &gains),
        stationary_policy_error_pct: 100.0 * oracle.policy_error(grid, &state, &u),
        j_error_pct: 100.0 * ((report.final_j.value - oracle_value) / oracle_value).abs(),
        stationarity_ratio: if report.initial_stationarity > 0.0 { report.final_stationarity / report.initial_stationarity } else { 0.0 },
        report,
    };
    Ok((u, state, bench))
}
