//! Coefficient bundles for the forward-backward system, control policies,
//! information structures and the builtin benchmark catalog.

use crate::drivers::{MarkSpace, TimeGrid};
use crate::error::{Error, Result};
use crate::paths::PathMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

/// Arguments of a forward kernel `b`, `sigma` or `theta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelPoint {
    pub t: f64,
    pub s: f64,
    pub x: f64,
    pub x1: f64,
    pub u: f64,
}

/// Kernel value with its partials in `(t, x, x1, u)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KernelJet {
    pub value: f64,
    pub d_t: f64,
    pub d_x: f64,
    pub d_x1: f64,
    pub d_u: f64,
}

/// Arguments of the generator `g`.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorPoint<'a> {
    pub t: f64,
    pub s: f64,
    pub x: f64,
    pub x1: f64,
    pub y: f64,
    pub z: f64,
    pub k: &'a [f64],
    pub u: f64,
}

/// Generator value with its scalar partials. Partials in the mark-indexed
/// `k` argument are written to a caller slice.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GeneratorJet {
    pub value: f64,
    pub d_t: f64,
    pub d_x: f64,
    pub d_x1: f64,
    pub d_y: f64,
    pub d_z: f64,
    pub d_u: f64,
}

/// Running reward `f(t, x, x1, y, u)` and its partials.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningJet {
    pub value: f64,
    pub d_x: f64,
    pub d_x1: f64,
    pub d_y: f64,
    pub d_u: f64,
}

/// Compact control interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlSet {
    pub lo: f64,
    pub hi: f64,
}

impl ControlSet {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.partial_cmp(&hi).is_none_or(|o| o.is_gt()) {
            return Err(Error::validation(format!("control interval [{lo}, {hi}] is empty")));
        }
        Ok(Self { lo, hi })
    }

    #[inline]
    pub fn clip(&self, u: f64) -> f64 {
        u.clamp(self.lo, self.hi)
    }

    #[inline]
    pub fn contains(&self, u: f64) -> bool {
        u >= self.lo && u <= self.hi
    }
}

/// Which coefficients carry genuine two-time dependence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Structure {
    /// `b`, `sigma` or `theta` depend on their first time argument.
    pub volterra_kernels: bool,
    /// `sigma` or `theta` depend on their first time argument.
    pub volterra_noise: bool,
    /// `g` depends on its first time argument.
    pub volterra_generator: bool,
    /// `g` is not identically zero.
    pub has_generator: bool,
}

/// A scalar forward-backward control problem.
///
/// The forward kernels are evaluated at `(t, s)` with `s < t`, the generator
/// at `t <= s`. Partials must be exact; [`validate_model`] probes them.
pub trait Model: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &str;
    /// Free term `xi(t)` and its derivative.
    fn initial(&self, t: f64) -> (f64, f64);
    fn drift(&self, p: &KernelPoint) -> KernelJet;
    fn diffusion(&self, p: &KernelPoint) -> KernelJet;
    fn jump(&self, p: &KernelPoint, mark: f64) -> KernelJet;
    fn generator(&self, p: &GeneratorPoint<'_>, d_k: &mut [f64]) -> GeneratorJet;
    fn running(&self, t: f64, x: f64, x1: f64, y: f64, u: f64) -> RunningJet;
    /// `h(y)` and `h'(y)`.
    fn terminal(&self, y: f64) -> (f64, f64);
    /// Lipschitz constant of `g` in `(y, z, k)`.
    fn lipschitz(&self) -> f64;
    fn controls(&self) -> ControlSet;
    fn structure(&self) -> Structure;
}

/// Outcome of [`validate_model`].
#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub failures: Vec<String>,
    pub probes: usize,
    /// `6 L^2 / beta` when a grid was supplied.
    pub contraction_bound_sq: Option<f64>,
    pub non_contractive: bool,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Converts failures into a validation error.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            Err(Error::validation(format!("model checks failed: {}", self.failures.join("; "))))
        }
    }
}

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn fd_close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= FD_TOL * analytic.abs().max(1.0)
}

fn central(f: impl Fn(f64) -> f64, at: f64) -> f64 {
    (f(at + FD_STEP) - f(at - FD_STEP)) / (2.0 * FD_STEP)
}

/// Checks the declared Lipschitz constant, every supplied partial and the
/// structure flags on randomized probes. Flags `beta <= 6 L^2` when a grid is
/// given.
pub fn validate_model(m: &dyn Model, marks: &MarkSpace, grid: Option<&TimeGrid>, probes: usize, seed: u64) -> ValidationReport {
    let mut rep = ValidationReport {
        probes,
        ..Default::default()
    };
    let us = m.controls();
    if us.lo.partial_cmp(&us.hi).is_none_or(|o| o.is_gt()) {
        rep.failures.push(format!("control interval [{}, {}] is empty", us.lo, us.hi));
    }
    let lip = m.lipschitz();
    if !(lip.is_finite() && lip >= 0.0) {
        rep.failures.push(format!("Lipschitz constant {lip} is not a finite nonnegative number"));
    }
    if let Some(g) = grid {
        let c = 6.0 * lip * lip / g.beta();
        rep.contraction_bound_sq = Some(c);
        rep.non_contractive = c >= 1.0;
    }
    let horizon = grid.map_or(10.0, TimeGrid::t_max);
    let nm = marks.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let structure = m.structure();
    let mut seen_t_kernel = false;
    let mut seen_t_noise = false;
    let mut seen_t_gen = false;
    let mut seen_gen = false;
    let fail = |rep: &mut ValidationReport, msg: String| {
        if rep.failures.len() < 50 {
            rep.failures.push(msg);
        }
    };
    for probe in 0..probes {
        let s = rng.random_range(0.0..horizon);
        let t = s + rng.random_range(0.0..horizon);
        let (x, x1, y, z) = (
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        let u = if us.hi > us.lo { rng.random_range(us.lo..=us.hi) } else { us.lo };
        let k: Vec<f64> = (0..nm).map(|_| rng.random_range(-2.0..2.0)).collect();

        let kp = KernelPoint { t, s, x, x1, u };
        let mut kernels: Vec<(&str, Box<dyn Fn(&KernelPoint) -> KernelJet + '_>)> = vec![
            ("b", Box::new(|p: &KernelPoint| m.drift(p))),
            ("sigma", Box::new(|p: &KernelPoint| m.diffusion(p))),
        ];
        for &e in marks.marks() {
            kernels.push(("theta", Box::new(move |p: &KernelPoint| m.jump(p, e))));
        }
        for (name, f) in &kernels {
            let j = f(&kp);
            let checks = [
                ("t", j.d_t, central(|v| f(&KernelPoint { t: v, ..kp }).value, t)),
                ("x", j.d_x, central(|v| f(&KernelPoint { x: v, ..kp }).value, x)),
                ("x1", j.d_x1, central(|v| f(&KernelPoint { x1: v, ..kp }).value, x1)),
                ("u", j.d_u, central(|v| f(&KernelPoint { u: v, ..kp }).value, u)),
            ];
            for (arg, a, n) in checks {
                if !fd_close(a, n) {
                    fail(&mut rep, format!("probe {probe}: d{name}/d{arg} = {a} but finite difference gives {n}"));
                }
            }
            if j.d_t != 0.0 {
                seen_t_kernel = true;
                if *name != "b" {
                    seen_t_noise = true;
                }
            }
        }

        let gp = GeneratorPoint { t: s, s: t, x, x1, y, z, k: &k, u };
        let mut dk = vec![0.0; nm];
        let gj = m.generator(&gp, &mut dk);
        let gv = |p: GeneratorPoint<'_>| m.generator(&p, &mut vec![0.0; nm]).value;
        let checks = [
            ("t", gj.d_t, central(|v| gv(GeneratorPoint { t: v, ..gp }), gp.t)),
            ("x", gj.d_x, central(|v| gv(GeneratorPoint { x: v, ..gp }), x)),
            ("x1", gj.d_x1, central(|v| gv(GeneratorPoint { x1: v, ..gp }), x1)),
            ("y", gj.d_y, central(|v| gv(GeneratorPoint { y: v, ..gp }), y)),
            ("z", gj.d_z, central(|v| gv(GeneratorPoint { z: v, ..gp }), z)),
            ("u", gj.d_u, central(|v| gv(GeneratorPoint { u: v, ..gp }), u)),
        ];
        for (arg, a, n) in checks {
            if !fd_close(a, n) {
                fail(&mut rep, format!("probe {probe}: dg/d{arg} = {a} but finite difference gives {n}"));
            }
        }
        for i in 0..nm {
            let n = central(
                |v| {
                    let mut kk = k.clone();
                    kk[i] = v;
                    gv(GeneratorPoint { k: &kk, ..gp })
                },
                k[i],
            );
            if !fd_close(dk[i], n) {
                fail(&mut rep, format!("probe {probe}: dg/dk[{i}] = {} but finite difference gives {n}", dk[i]));
            }
        }
        if gj.d_t != 0.0 {
            seen_t_gen = true;
        }
        if gj.value != 0.0 {
            seen_gen = true;
        }

        // Lipschitz probe in (y, z, k) against a second random point.
        let y2 = y + rng.random_range(-1.0..1.0);
        let z2 = z + rng.random_range(-1.0..1.0);
        let k2: Vec<f64> = k.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect();
        let g2 = gv(GeneratorPoint { y: y2, z: z2, k: &k2, ..gp });
        let dkv: Vec<f64> = k.iter().zip(&k2).map(|(a, b)| a - b).collect();
        let bound = lip * ((y - y2).abs() + (z - z2).abs() + marks.norm_sq(&dkv).sqrt());
        if (gj.value - g2).abs() > bound * (1.0 + 1e-9) + 1e-12 {
            fail(
                &mut rep,
                format!("probe {probe}: generator moved by {} but the declared L bounds it by {bound}", (gj.value - g2).abs()),
            );
        }

        let rj = m.running(s, x, x1, y, u);
        let checks = [
            ("x", rj.d_x, central(|v| m.running(s, v, x1, y, u).value, x)),
            ("x1", rj.d_x1, central(|v| m.running(s, x, v, y, u).value, x1)),
            ("y", rj.d_y, central(|v| m.running(s, x, x1, v, u).value, y)),
            ("u", rj.d_u, central(|v| m.running(s, x, x1, y, v).value, u)),
        ];
        for (arg, a, n) in checks {
            if !fd_close(a, n) {
                fail(&mut rep, format!("probe {probe}: df/d{arg} = {a} but finite difference gives {n}"));
            }
        }
        let (_, hp) = m.terminal(y);
        let hn = central(|v| m.terminal(v).0, y);
        if !fd_close(hp, hn) {
            fail(&mut rep, format!("probe {probe}: h'(y) = {hp} but finite difference gives {hn}"));
        }
        let tt = rng.random_range(-horizon / 4.0..horizon);
        let (_, xp) = m.initial(tt);
        let xn = central(|v| m.initial(v).0, tt);
        if !fd_close(xp, xn) {
            fail(&mut rep, format!("probe {probe}: xi'(t) = {xp} but finite difference gives {xn}"));
        }
    }
    if seen_t_kernel && !structure.volterra_kernels {
        fail(&mut rep, "forward kernels depend on their first time argument but are declared Markov".into());
    }
    if seen_t_noise && !structure.volterra_noise {
        fail(&mut rep, "diffusion or jump kernels depend on their first time argument but are declared Markov".into());
    }
    if seen_t_gen && !structure.volterra_generator {
        fail(&mut rep, "generator depends on its first time argument but is declared Markov".into());
    }
    if seen_gen && !structure.has_generator {
        fail(&mut rep, "generator is nonzero but declared absent".into());
    }
    rep
}

/// Information available to the controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InfoStructure {
    Full,
    /// State observed with a lag (an exact grid multiple).
    Delayed { lag: f64 },
    Trivial,
}

impl InfoStructure {
    /// Lag in grid steps; zero for `Full` and `Trivial`.
    pub fn lag_steps(&self, grid: &TimeGrid) -> Result<usize> {
        match *self {
            InfoStructure::Delayed { lag } => {
                if !(lag.is_finite() && lag >= 0.0) {
                    return Err(Error::validation(format!("information lag {lag} must be nonnegative")));
                }
                let k = (lag / grid.dt()).round();
                if ((k * grid.dt()) - lag).abs() > 1e-9 * lag.max(grid.dt()) {
                    return Err(Error::validation(format!("information lag {lag} is not a multiple of dt = {}", grid.dt())));
                }
                Ok(k as usize)
            }
            _ => Ok(0),
        }
    }
}

/// Control values per path and step, adapted to an information structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPolicy {
    values: PathMatrix,
    info: InfoStructure,
}

impl ControlPolicy {
    /// Wraps values on steps `0..=n_steps`, rejecting any outside `U`.
    pub fn new(values: PathMatrix, info: InfoStructure, set: &ControlSet) -> Result<Self> {
        if values.first_step() != 0 {
            return Err(Error::validation("control values must start at step 0"));
        }
        for p in 0..values.n_paths() {
            for (i, v) in values.row(p).iter().enumerate() {
                if !set.contains(*v) {
                    return Err(Error::validation(format!(
                        "control value {v} at path {p}, step {i} lies outside [{}, {}]",
                        set.lo, set.hi
                    )));
                }
            }
        }
        Ok(Self { values, info })
    }

    /// The same value on every path and step.
    pub fn constant(n_paths: usize, grid: &TimeGrid, u: f64, info: InfoStructure, set: &ControlSet) -> Result<Self> {
        Self::new(PathMatrix::filled(n_paths, 0, grid.n_steps() as isize, u), info, set)
    }

    pub fn values(&self) -> &PathMatrix {
        &self.values
    }

    pub fn info(&self) -> InfoStructure {
        self.info
    }

    #[inline]
    pub fn get(&self, path: usize, step: usize) -> f64 {
        self.values.get(path, step as isize)
    }

    pub fn n_paths(&self) -> usize {
        self.values.n_paths()
    }

    /// Checks the policy covers the grid and the driver ensemble.
    pub fn check_shape(&self, grid: &TimeGrid, n_paths: usize) -> Result<()> {
        if self.values.n_paths() != n_paths || self.values.last_step() < grid.n_steps() as isize - 1 {
            return Err(Error::validation(format!(
                "policy has {} paths and {} steps; expected {n_paths} paths and {} steps",
                self.values.n_paths(),
                self.values.n_steps(),
                grid.n_steps()
            )));
        }
        Ok(())
    }
}

/// Named parameters of a builtin.
pub type Params = BTreeMap<String, f64>;

fn take(params: &Params, defaults: &[(&str, f64)], model: &str) -> Result<Vec<f64>> {
    for key in params.keys() {
        if !defaults.iter().any(|(k, _)| k == key) {
            let known: Vec<&str> = defaults.iter().map(|(k, _)| *k).collect();
            return Err(Error::validation(format!(
                "unknown parameter '{key}' for model '{model}' (known: {})",
                known.join(", ")
            )));
        }
    }
    defaults
        .iter()
        .map(|(k, d)| {
            let v = params.get(*k).copied().unwrap_or(*d);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::validation(format!("parameter '{k}' of model '{model}' is not finite")))
            }
        })
        .collect()
}

/// Names accepted by [`builtin`].
pub const BUILTINS: [&str; 6] = ["zero", "det_volterra", "exp_generator", "sdde", "jump_linear", "lq"];

/// Builds a catalog model from its name and parameter table.
pub fn builtin(name: &str, params: &Params) -> Result<Arc<dyn Model>> {
    Ok(match name {
        "zero" => {
            take(params, &[], name)?;
            Arc::new(Zero)
        }
        "det_volterra" => {
            let v = take(
                params,
                &[
                    ("a", -0.5),
                    ("gamma", 1.0),
                    ("x0", 1.0),
                    ("control_gain", 0.0),
                    ("cost_weight", 0.0),
                    ("rho", 0.1),
                    ("kappa", 1.0),
                    ("u_max", 10.0),
                ],
                name,
            )?;
            Arc::new(DetVolterra {
                a: v[0],
                gamma: v[1],
                x0: v[2],
                control_gain: v[3],
                cost: Quadratic::new(v[4], v[5], v[6]),
                u: ControlSet::new(-v[7], v[7])?,
            })
        }
        "exp_generator" => {
            let v = take(params, &[("c", 1.0), ("c_z", 0.0)], name)?;
            Arc::new(ExpGenerator { c: v[0], c_z: v[1] })
        }
        "sdde" => {
            let v = take(
                params,
                &[
                    ("a", -1.0),
                    ("a1", 0.5),
                    ("s0", 0.3),
                    ("s1", 0.2),
                    ("c", 0.5),
                    ("rho", 0.1),
                    ("kappa", 1.0),
                    ("x0", 1.0),
                    ("u_max", 10.0),
                ],
                name,
            )?;
            Arc::new(Sdde {
                a: v[0],
                a1: v[1],
                s0: v[2],
                s1: v[3],
                c: v[4],
                cost: Quadratic::new(1.0, v[5], v[6]),
                x0: v[7],
                u: ControlSet::new(-v[8], v[8])?,
            })
        }
        "jump_linear" => {
            let v = take(
                params,
                &[
                    ("a", -1.0),
                    ("s0", 0.3),
                    ("gamma", 0.5),
                    ("eta", 0.5),
                    ("rho", 0.1),
                    ("kappa", 1.0),
                    ("x0", 1.0),
                    ("u_max", 10.0),
                ],
                name,
            )?;
            Arc::new(JumpLinear {
                a: v[0],
                s0: v[1],
                gamma: v[2],
                eta: v[3],
                cost: Quadratic::new(1.0, v[4], v[5]),
                x0: v[6],
                u: ControlSet::new(-v[7], v[7])?,
            })
        }
        "lq" => {
            let v = LqSettings::from_params(params)?;
            Arc::new(Lq {
                a: v.a,
                sigma: v.sigma,
                cost: Quadratic::new(1.0, v.rho, v.kappa),
                x0: v.x0,
                u: ControlSet::new(-v.u_max, v.u_max)?,
            })
        }
        other => {
            return Err(Error::validation(format!(
                "unknown model '{other}' (known: {})",
                BUILTINS.join(", ")
            )))
        }
    })
}

/// `-w/2 e^{-rho t} (x^2 + kappa u^2)`.
#[derive(Debug, Clone, Copy)]
struct Quadratic {
    weight: f64,
    rho: f64,
    kappa: f64,
}

impl Quadratic {
    fn new(weight: f64, rho: f64, kappa: f64) -> Self {
        Self { weight, rho, kappa }
    }

    fn eval(&self, t: f64, x: f64, u: f64) -> RunningJet {
        let d = self.weight * (-self.rho * t).exp();
        RunningJet {
            value: -0.5 * d * (x * x + self.kappa * u * u),
            d_x: -d * x,
            d_x1: 0.0,
            d_y: 0.0,
            d_u: -d * self.kappa * u,
        }
    }
}

fn no_jet() -> KernelJet {
    KernelJet::default()
}

fn zero_generator(d_k: &mut [f64]) -> GeneratorJet {
    d_k.fill(0.0);
    GeneratorJet::default()
}

#[derive(Debug)]
struct Zero;

impl Model for Zero {
    fn name(&self) -> &str {
        "zero"
    }
    fn initial(&self, _t: f64) -> (f64, f64) {
        (0.0, 0.0)
    }
    fn drift(&self, _p: &KernelPoint) -> KernelJet {
        no_jet()
    }
    fn diffusion(&self, _p: &KernelPoint) -> KernelJet {
        no_jet()
    }
    fn jump(&self, _p: &KernelPoint, _mark: f64) -> KernelJet {
        no_jet()
    }
    fn generator(&self, _p: &GeneratorPoint<'_>, d_k: &mut [f64]) -> GeneratorJet {
        zero_generator(d_k)
    }
    fn running(&self, _t: f64, _x: f64, _x1: f64, _y: f64, _u: f64) -> RunningJet {
        RunningJet::default()
    }
    fn terminal(&self, _y: f64) -> (f64, f64) {
        (0.0, 0.0)
    }
    fn lipschitz(&self) -> f64 {
        0.0
    }
    fn controls(&self) -> ControlSet {
        ControlSet { lo: -1.0, hi: 1.0 }
    }
    fn structure(&self) -> Structure {
        Structure::default()
    }
}

/// Deterministic Volterra drift `e^{-gamma (t - s)} (a x + control_gain u)`
/// with constant free term `x0`.
#[derive(Debug)]
struct DetVolterra {
    a: f64,
    gamma: f64,
    x0: f64,
    control_gain: f64,
    cost: Quadratic,
    u: ControlSet,
}

impl Model for DetVolterra {
    fn name(&self) -> &str {
        "det_volterra"
    }
    fn initial(&self, _t: f64) -> (f64, f64) {
        (self.x0, 0.0)
    }
    fn drift(&self, p: &KernelPoint) -> KernelJet {
        let w = (-self.gamma * (p.t - p.s)).exp();
        let inner = self.a * p.x + self.control_gain * p.u;
        KernelJet {
            value: w * inner,
            d_t: -self.gamma * w * inner,
            d_x: w * self.a,
            d_x1: 0.0,
            d_u: w * self.control_gain,
        }
    }
    fn diffusion(&self, _p: &KernelPoint) -> KernelJet {
        no_jet()
    }
    fn jump(&self, _p: &KernelPoint, _mark: f64) -> KernelJet {
        no_jet()
    }
    fn generator(&self, _p: &GeneratorPoint<'_>, d_k: &mut [f64]) -> GeneratorJet {
        zero_generator(d_k)
    }
    fn running(&self, t: f64, x: f64, _x1: f64, _y: f64, u: f64) -> RunningJet {
        self.cost.eval(t, x, u)
    }
    fn terminal(&self, _y: f64) -> (f64, f64) {
        (0.0, 0.0)
    }
    fn lipschitz(&self) -> f64 {
        0.0
    }
    fn controls(&self) -> ControlSet {
        self.u
    }
    fn structure(&self) -> Structure {
        Structure {
            volterra_kernels: self.gamma != 0.0,
            volterra_noise: false,
            volterra_generator: false,
            has_generator: false,
        }
    }
}

/// Trivial forward state with generator `-c y + c_z z + e^{-s}` and `h(y) = y`.
#[derive(Debug)]
struct ExpGenerator {
    c: f64,
    c_z: f64,
}

impl Model for ExpGenerator {
    fn name(&self) -> &str {
        "exp_generator"
    }
    fn initial(&self, _t: f64) -> (f64, f64) {
        (0.0, 0.0)
    }
    fn drift(&self, _p: &KernelPoint) -> KernelJet {
        no_jet()
    }
    fn diffusion(&self, _p: &KernelPoint) -> KernelJet {
        no_jet()
    }
    fn jump(&self, _p: &KernelPoint, _mark: f64) -> KernelJet {
        no_jet()
    }
    fn generator(&self, p: &GeneratorPoint<'_>, d_k: &mut [f64]) -> GeneratorJet {
        d_k.fill(0.0);
        let e = (-p.s).exp();
        GeneratorJet {
            value: -self.c * p.y + self.c_z * p.z + e,
            d_y: -self.c,
            d_z: self.c_z,
            ..Default::default()
        }
    }
    fn running(&self, _t: f64, _x: f64, _x1: f64, _y: f64, _u: f64) -> RunningJet {
        RunningJet::default()
    }
    fn terminal(&self, y: f64) -> (f64, f64) {
        (y, 1.0)
    }
    fn lipschitz(&self) -> f64 {
        self.c.abs().max(self.c_z.abs())
    }
    fn controls(&self) -> ControlSet {
        ControlSet { lo: -1.0, hi: 1.0 }
    }
    fn structure(&self) -> Structure {
        Structure {
            volterra_kernels: false,
            volterra_noise: false,
            volterra_generator: false,
            has_generator: true,
        }
    }
}

/// Delay SDE `dX = (a X + a1 X(t - delay) + u) dt + (s0 + s1 X) dB` with
/// generator `-c y + x` and `h(y) = y`.
#[derive(Debug)]
struct Sdde {
    a: f64,
    a1: f64,
    s0: f64,
    s1: f64,
    c: f64,
    cost: Quadratic,
    x0: f64,
    u: ControlSet,
}

impl Model for Sdde {
    fn name(&self) -> &str {
        "sdde"
    }
    fn initial(&self, _t: f64) -> (f64, f64) {
        (self.x0, 0.0)
    }
    fn drift(&self, p: &KernelPoint) -> KernelJet {
        KernelJet {
            value: self.a * p.x + self.a1 * p.x1 + p.u,
            d_t: 0.0,
            d_x: self.a,
            d_x1: self.a1,
            d_u: 1.0,
        }
    }
    fn diffusion(&self, p: &KernelPoint) -> KernelJet {
        KernelJet {
            value: self.s0 + self.s1 * p.x,
            d_x: self.s1,
            ..Default::default()
        }
    }
    fn jump(&self, _p: &KernelPoint, _mark: f64) -> KernelJet {
        no_jet()
    }
    fn generator(&self, p: &GeneratorPoint<'_>, d_k: &mut [f64]) -> GeneratorJet {
        d_k.fill(0.0);
        GeneratorJet {
            value: -self.c * p.y + p.x,
            d_x: 1.0,
            d_y: -self.c,
            ..Default::default()
        }
    }
    fn running(&self, t: f64, x: f64, _x1: f64, _y: f64, u: f64) -> RunningJet {
        self.cost.eval(t, x, u)
    }
    fn terminal(&self, y: f64) -> (f64, f64) {
        (y, 1.0)
    }
    fn lipschitz(&self) -> f64 {
        self.c.abs()
    }
    fn controls(&self) -> ControlSet {
        self.u
    }
    fn structure(&self) -> Structure {
        Structure {
            volterra_kernels: false,
            volterra_noise: false,
            volterra_generator: false,
            has_generator: true,
        }
    }
}

/// Jump diffusion `dX = (a X + u) dt + s0 dB + e (gamma X + eta u) dN(e)`.
#[derive(Debug)]
struct JumpLinear {
    a: f64,
    s0: f64,
    gamma: f64,
    eta: f64,
    cost: Quadratic,
    x0: f64,
    u: ControlSet,
}

impl Model for JumpLinear {
    fn name(&self) -> &str {
        "jump_linear"
    }
    fn initial(&self, _t: f64) -> (f64, f64) {
        (self.x0, 0.0)
    }
    fn drift(&self, p: &KernelPoint) -> KernelJet {
        KernelJet {
            value: self.a * p.x + p.u,
            d_x: self.a,
            d_u: 1.0,
            ..Default::default()
        }
    }
    fn diffusion(&self, _p: &KernelPoint) -> KernelJet {
        KernelJet {
            value: self.s0,
            ..Default::default()
        }
    }
    fn jump(&self, p: &KernelPoint, mark: f64) -> KernelJet {
        KernelJet {
            value: mark * (self.gamma * p.x + self.eta * p.u),
            d_x: mark * self.gamma,
            d_u: mark * self.eta,
            ..Default::default()
        }
    }
    fn generator(&self, _p: &GeneratorPoint<'_>, d_k: &mut [f64]) -> GeneratorJet {
        zero_generator(d_k)
    }
    fn running(&self, t: f64, x: f64, _x1: f64, _y: f64, u: f64) -> RunningJet {
        self.cost.eval(t, x, u)
    }
    fn terminal(&self, _y: f64) -> (f64, f64) {
        (0.0, 0.0)
    }
    fn lipschitz(&self) -> f64 {
        0.0
    }
    fn controls(&self) -> ControlSet {
        self.u
    }
    fn structure(&self) -> Structure {
        Structure::default()
    }
}

/// Parameters of the `lq` builtin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LqSettings {
    pub a: f64,
    pub sigma: f64,
    pub rho: f64,
    pub kappa: f64,
    pub x0: f64,
    pub u_max: f64,
}

impl LqSettings {
    pub fn from_params(params: &Params) -> Result<Self> {
        let v = take(
            params,
            &[("a", -1.0), ("sigma", 0.5), ("rho", 0.1), ("kappa", 1.0), ("x0", 1.0), ("u_max", 100.0)],
            "lq",
        )?;
        if v[3] <= 0.0 {
            return Err(Error::validation("lq requires kappa > 0"));
        }
        if v[2] <= 0.0 {
            return Err(Error::validation("lq requires rho > 0"));
        }
        Ok(Self {
            a: v[0],
            sigma: v[1],
            rho: v[2],
            kappa: v[3],
            x0: v[4],
            u_max: v[5],
        })
    }
}

/// Discounted linear-quadratic regulator `dX = (a X + u) dt + sigma dB`.
#[derive(Debug)]
pub struct Lq {
    a: f64,
    sigma: f64,
    cost: Quadratic,
    x0: f64,
    u: ControlSet,
}

impl Model for Lq {
    fn name(&self) -> &str {
        "lq"
    }
    fn initial(&self, _t: f64) -> (f64, f64) {
        (self.x0, 0.0)
    }
    fn drift(&self, p: &KernelPoint) -> KernelJet {
        KernelJet {
            value: self.a * p.x + p.u,
            d_x: self.a,
            d_u: 1.0,
            ..Default::default()
        }
    }
    fn diffusion(&self, _p: &KernelPoint) -> KernelJet {
        KernelJet {
            value: self.sigma,
            ..Default::default()
        }
    }
    fn jump(&self, _p: &KernelPoint, _mark: f64) -> KernelJet {
        no_jet()
    }
    fn generator(&self, _p: &GeneratorPoint<'_>, d_k: &mut [f64]) -> GeneratorJet {
        zero_generator(d_k)
    }
    fn running(&self, t: f64, x: f64, _x1: f64, _y: f64, u: f64) -> RunningJet {
        self.cost.eval(t, x, u)
    }
    fn terminal(&self, _y: f64) -> (f64, f64) {
        (0.0, 0.0)
    }
    fn lipschitz(&self) -> f64 {
        0.0
    }
    fn controls(&self) -> ControlSet {
        self.u
    }
    fn structure(&self) -> Structure {
        Structure::default()
    }
}
