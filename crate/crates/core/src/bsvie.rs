//! Truncated-horizon solver for the infinite-horizon backward Volterra
//! equation by Picard iteration over a family of BSDEs indexed by the row `t`.
//!
//! For a frozen triple `(y, z, k)` each row solves backward
//! `Y~(r) = E_r[Y~(r+1)] + g(t, s_r, X_r, X1_r, y_r, z(t, s_r), k(t, s_r), u_r) dt`
//! from `Y~(n) = 0`, identifies `Z`, `K` by martingale-increment regression
//! and returns the diagonal `Y(t) = Y~^t(t)`.

use crate::drivers::{weighted_norm_sq, DriverPaths, TimeGrid};
use crate::error::{Error, Result};
use crate::field::{cell_bytes, Conditioning, Layout, TriangularField};
use crate::forward::ForwardEnsemble;
use crate::models::{ControlPolicy, GeneratorPoint, Model};
use crate::paths::PathMatrix;
use crate::regression::{Regressor, MAX_BASIS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub degree: usize,
    /// Upper bound on triangular-field storage, in bytes.
    pub memory_cap: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 100,
            degree: 3,
            memory_cap: 2 << 30,
        }
    }
}

/// The triple `(y, z, k)` a Picard step freezes in the generator.
#[derive(Debug, Clone)]
pub struct Frozen {
    pub y: PathMatrix,
    pub z: TriangularField,
    pub k: TriangularField,
}

impl Frozen {
    pub fn zeros(reg: &Arc<Regressor>, grid: &TimeGrid, n_marks: usize) -> Self {
        let n = grid.n_steps();
        Self {
            y: PathMatrix::zeros(reg.n_paths(), 0, n as isize),
            z: TriangularField::zeros_row_invariant(reg.clone(), n, 1),
            k: TriangularField::zeros_row_invariant(reg.clone(), n, n_marks.max(1)),
        }
    }

    /// Random smooth triple in the row-invariant subspace: deterministic
    /// time profiles plus a state-proportional part in `y`.
    pub fn random(reg: &Arc<Regressor>, grid: &TimeGrid, state: &ForwardEnsemble, n_marks: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = grid.n_steps();
        let profile = |rng: &mut ChaCha8Rng| {
            let (a, w, ph, decay) = (
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..3.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..0.5),
            );
            move |t: f64| a * (-decay * t).exp() * (w * t + ph).cos()
        };
        let base = profile(&mut rng);
        let slope = profile(&mut rng);
        let mut out = Self::zeros(reg, grid, n_marks);
        for p in 0..reg.n_paths() {
            for i in 0..n {
                let t = grid.time(i as isize);
                out.y.set(p, i as isize, base(t) + 0.1 * slope(t) * state.x(p, i));
            }
        }
        for comp_field in [&mut out.z, &mut out.k] {
            for c in 0..comp_field.n_components() {
                let prof = profile(&mut rng);
                for s in 0..n {
                    let mut coeffs = vec![0.0; reg.len(s)];
                    coeffs[0] = prof(grid.time(s as isize));
                    comp_field.set_coeffs(0, s, c, &coeffs);
                }
            }
        }
        out
    }
}

/// Picard diagnostics.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Diagnostics {
    /// `||x_{k} - x_{k-1}||` in the weighted norm, one per iteration.
    pub distances: Vec<f64>,
    /// Squared ratios `d_{k+1}^2 / d_k^2`.
    pub ratios: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_residual: f64,
    pub contraction_bound_sq: f64,
    pub non_contractive: bool,
    pub warnings: Vec<String>,
}

/// Diagonal fits recorded by one Picard step.
#[derive(Debug, Clone)]
pub struct StepFits {
    /// Coefficients of `E_t[Y~^t(t+1)]` per step `t`.
    pub cond: Vec<Vec<f64>>,
    /// Coefficients of `Z(t, t)` per step.
    pub z: Vec<Vec<f64>>,
    /// Coefficients of `K(t, t, e)` per step and mark.
    pub k: Vec<Vec<Vec<f64>>>,
}

/// Backward solution with diagnostics.
#[derive(Debug, Clone)]
pub struct BackwardSolution {
    pub y: PathMatrix,
    pub z: TriangularField,
    pub k: TriangularField,
    pub diagnostics: Diagnostics,
    pub regressor: Arc<Regressor>,
    /// Input of the last Picard step.
    pub last_input: Frozen,
    /// Diagonal fits of every Picard step, in order.
    pub trace: Vec<StepFits>,
}

/// `6 L^2 / beta` and whether it fails to be a contraction.
pub fn contraction_bound_sq(lipschitz: f64, beta: f64) -> Result<(f64, bool)> {
    if beta.is_nan() || beta <= 0.0 {
        return Err(Error::validation(format!("beta must be positive, got {beta}")));
    }
    if lipschitz.is_nan() || lipschitz < 0.0 {
        return Err(Error::validation(format!("Lipschitz constant must be nonnegative, got {lipschitz}")));
    }
    let c = 6.0 * lipschitz * lipschitz / beta;
    Ok((c, c >= 1.0))
}

/// Everything a row solve reads.
pub struct Problem<'a> {
    pub model: &'a dyn Model,
    pub grid: &'a TimeGrid,
    pub drivers: &'a DriverPaths,
    pub state: &'a ForwardEnsemble,
    pub control: &'a ControlPolicy,
    pub regressor: &'a Arc<Regressor>,
}

impl<'a> Problem<'a> {
    fn check(&self) -> Result<()> {
        self.drivers.check_grid(self.grid)?;
        self.control.check_shape(self.grid, self.drivers.n_paths())?;
        if self.state.n_paths() != self.drivers.n_paths() || self.regressor.n_paths() != self.drivers.n_paths() {
            return Err(Error::validation("state, regressor and drivers differ in path count"));
        }
        if self.regressor.n_steps() != self.grid.n_steps() {
            return Err(Error::validation("regressor does not match the grid"));
        }
        Ok(())
    }

    fn n_marks(&self) -> usize {
        self.drivers.n_marks()
    }

    /// Diagonal value `eval(cond) + g(t, t, ..) dt` shared by the solver and replay.
    #[inline]
    fn diagonal_value(&self, p: usize, i: usize, feats: &[f64], cond: &[f64], y: f64, z: f64, k: &[f64], dk: &mut [f64]) -> f64 {
        let t = self.grid.time(i as isize);
        let g = self.model.generator(
            &GeneratorPoint {
                t,
                s: t,
                x: self.state.x(p, i),
                x1: self.state.x1(p, i),
                y,
                z,
                k,
                u: self.control.get(p, i),
            },
            dk,
        );
        Regressor::eval(cond, feats) + g.value * self.grid.dt()
    }
}

/// Output of one backward row sweep.
struct RowSweep {
    /// `Y~(t)` per path at the row's own step (or at every step when
    /// sweeping the shared row).
    values: Vec<Vec<f64>>,
    cond: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    k: Vec<Vec<Vec<f64>>>,
    row: Option<PathMatrix>,
}

/// Backward sweep from `n` to `stop`. With `shared`, the generator's first
/// argument follows `s` and every step is recorded as a diagonal.
fn sweep(pb: &Problem<'_>, frozen: &Frozen, row: usize, stop: usize, shared: bool, keep_row: bool) -> Result<RowSweep> {
    let n = pb.grid.n_steps();
    let dt = pb.grid.dt();
    let np = pb.drivers.n_paths();
    let nm = pb.n_marks();
    let nu = pb.drivers.marks().intensities().to_vec();
    let reg = pb.regressor;
    let x = pb.state.states();
    let mut cur = vec![0.0; np];
    let mut next = vec![0.0; np];
    let steps = n - stop;
    let mut out = RowSweep {
        values: Vec::new(),
        cond: vec![Vec::new(); steps],
        z: vec![Vec::new(); steps],
        k: vec![Vec::new(); steps],
        row: keep_row.then(|| PathMatrix::zeros(np, row as isize, n as isize)),
    };
    let mut all_zero = true;
    for r in (stop..n).rev() {
        let nb = reg.len(r);
        let (cond, zc, kc) = if all_zero {
            (vec![0.0; nb], vec![0.0; nb], vec![vec![0.0; nb]; nm])
        } else {
            let cond = reg.project(r, x, &cur);
            // Martingale increments use the residual against the fitted mean,
            // so deterministic rows give exactly zero Z and K.
            let fits = reg.project_many(r, x, 1 + nm, |p, o| {
                let mut f = [0.0; MAX_BASIS];
                let f = &mut f[..nb];
                reg.path_features(r, x, p, f);
                let v = cur[p] - Regressor::eval(&cond, f);
                o[0] = v * pb.drivers.db(p, r);
                for e in 0..nm {
                    o[1 + e] = v * pb.drivers.dn(p, r, e);
                }
            });
            let zc: Vec<f64> = fits[0].iter().map(|v| v / dt).collect();
            let kc: Vec<Vec<f64>> = (0..nm)
                .map(|e| {
                    if nu[e] > 0.0 {
                        fits[1 + e].iter().map(|v| v / (nu[e] * dt)).collect()
                    } else {
                        vec![0.0; nb]
                    }
                })
                .collect();
            (cond, zc, kc)
        };
        let first = if shared { r } else { row };
        let t_first = pb.grid.time(first as isize);
        let s = pb.grid.time(r as isize);
        let is_diag = shared || r == row;
        let chunks: Vec<Result<()>> = next
            .par_chunks_mut(crate::par::CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut f = vec![0.0; nb];
                let mut kv = vec![0.0; nm];
                let mut dk = vec![0.0; nm];
                for (o, slot) in chunk.iter_mut().enumerate() {
                    let p = c * crate::par::CHUNK + o;
                    reg.path_features(r, x, p, &mut f);
                    let zv = frozen.z.value(first, r, 0, &f).expect("frozen z is stored on the triangle");
                    for e in 0..nm {
                        kv[e] = frozen.k.value(first, r, e, &f).expect("frozen k is stored on the triangle");
                    }
                    let y = frozen.y.get(p, r as isize);
                    let v = if is_diag {
                        pb.diagonal_value(p, r, &f, &cond, y, zv, &kv, &mut dk)
                    } else {
                        let g = pb.model.generator(
                            &GeneratorPoint {
                                t: t_first,
                                s,
                                x: pb.state.x(p, r),
                                x1: pb.state.x1(p, r),
                                y,
                                z: zv,
                                k: &kv,
                                u: pb.control.get(p, r),
                            },
                            &mut dk,
                        );
                        Regressor::eval(&cond, &f) + g.value * dt
                    };
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            what: "backward row",
                            path: p,
                            step: r as isize,
                        });
                    }
                    *slot = v;
                }
                Ok(())
            })
            .collect();
        chunks.into_iter().collect::<Result<()>>()?;
        std::mem::swap(&mut cur, &mut next);
        all_zero = all_zero && cur.iter().all(|v| *v == 0.0);
        if let Some(m) = out.row.as_mut() {
            m.set_column(r as isize, &cur);
        }
        if shared || r == row {
            out.values.push(cur.clone());
        }
        let slot = r - stop;
        out.cond[slot] = cond;
        out.z[slot] = zc;
        out.k[slot] = kc;
    }
    out.values.reverse();
    Ok(out)
}

/// One BSDE of the family: row `t` under a frozen triple. Returns
/// `(Y~^t on steps t..=n, Z~^t(t, s) fits, K~^t(t, s, e) fits)`.
pub fn solve_bsde_row(pb: &Problem<'_>, frozen: &Frozen, t: usize) -> Result<(PathMatrix, Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>)> {
    pb.check()?;
    if t >= pb.grid.n_steps() {
        return Err(Error::validation(format!("row {t} outside 0..n_steps")));
    }
    let sw = sweep(pb, frozen, t, t, false, true)?;
    Ok((sw.row.expect("row kept"), sw.z, sw.k))
}

/// Whether rows coincide under this frozen triple.
fn rows_shared(m: &dyn Model, frozen: &Frozen) -> bool {
    !m.structure().volterra_generator && frozen.z.layout() == Layout::RowInvariant && frozen.k.layout() == Layout::RowInvariant
}

/// The Picard map: solves all rows and extracts the diagonal. Also returns
/// the diagonal fits for replay.
pub fn picard_map(pb: &Problem<'_>, frozen: &Frozen, settings: &SolverSettings) -> Result<(Frozen, StepFits)> {
    let n = pb.grid.n_steps();
    let np = pb.drivers.n_paths();
    let comps = pb.n_marks().max(1);
    let reg = pb.regressor;
    let mut y = PathMatrix::zeros(np, 0, n as isize);
    if rows_shared(pb.model, frozen) {
        let sw = sweep(pb, frozen, 0, 0, true, false)?;
        let mut z = TriangularField::zeros_row_invariant(reg.clone(), n, 1);
        let mut k = TriangularField::zeros_row_invariant(reg.clone(), n, comps);
        for s in 0..n {
            y.set_column(s as isize, &sw.values[s]);
            z.set_coeffs(0, s, 0, &sw.z[s]);
            for (e, c) in sw.k[s].iter().enumerate() {
                k.set_coeffs(0, s, e, c);
            }
        }
        let fits = StepFits {
            cond: sw.cond,
            z: sw.z,
            k: sw.k,
        };
        return Ok((Frozen { y, z, k }, fits));
    }
    let stride = reg.max_len();
    let need = cell_bytes(n, 1 + comps, stride);
    if need > settings.memory_cap {
        return Err(Error::ResourceCap(format!(
            "triangular fields need {need} bytes, above the cap of {}; reduce n_steps",
            settings.memory_cap
        )));
    }
    let rows: Vec<Result<RowSweep>> = (0..n).into_par_iter().map(|t| sweep(pb, frozen, t, t, false, false)).collect();
    let mut z = TriangularField::zeros_cells(reg.clone(), n, 1, Conditioning::Column);
    let mut k = TriangularField::zeros_cells(reg.clone(), n, comps, Conditioning::Column);
    let mut fits = StepFits {
        cond: Vec::with_capacity(n),
        z: Vec::with_capacity(n),
        k: Vec::with_capacity(n),
    };
    for (t, row) in rows.into_iter().enumerate() {
        let row = row?;
        y.set_column(t as isize, &row.values[0]);
        for s in t..n {
            z.set_coeffs(t, s, 0, &row.z[s - t]);
            for (e, c) in row.k[s - t].iter().enumerate() {
                k.set_coeffs(t, s, e, c);
            }
        }
        fits.cond.push(row.cond[0].clone());
        fits.z.push(row.z[0].clone());
        fits.k.push(row.k[0].clone());
    }
    Ok((Frozen { y, z, k }, fits))
}

fn distance_sq(a: &Frozen, b: &Frozen, pb: &Problem<'_>) -> Result<f64> {
    let dy = a.y.zip_map(&b.y, |u, v| u - v)?;
    let dz = a.z.sub(&b.z)?;
    let dk = a.k.sub(&b.k)?;
    weighted_norm_sq(&dy, &dz, &dk, pb.grid, pb.drivers.marks())
}

fn zero_like(a: &Frozen) -> Frozen {
    Frozen {
        y: a.y.map(|_| 0.0),
        z: a.z.scaled(0.0),
        k: a.k.scaled(0.0),
    }
}

/// Picard iteration from the zero triple. Stops when the weighted distance
/// between iterates falls below `tol` times `max(1, ||iterate||)` and no
/// value of `Y` moved by more than `tol` times `max(1, max |Y|)`. The second
/// test matters because the weights hide early times.
pub fn picard_solve(
    m: &dyn Model,
    grid: &TimeGrid,
    drivers: &DriverPaths,
    state: &ForwardEnsemble,
    u: &ControlPolicy,
    settings: &SolverSettings,
) -> Result<BackwardSolution> {
    let reg = Arc::new(Regressor::fit(state.states(), grid, settings.degree));
    let start = Frozen::zeros(&reg, grid, drivers.n_marks());
    picard_solve_from(m, grid, drivers, state, u, settings, reg, start)
}

/// Picard iteration from a given initial triple built on `reg`.
#[allow(clippy::too_many_arguments)]
pub fn picard_solve_from(
    m: &dyn Model,
    grid: &TimeGrid,
    drivers: &DriverPaths,
    state: &ForwardEnsemble,
    u: &ControlPolicy,
    settings: &SolverSettings,
    reg: Arc<Regressor>,
    start: Frozen,
) -> Result<BackwardSolution> {
    let pb = Problem {
        model: m,
        grid,
        drivers,
        state,
        control: u,
        regressor: &reg,
    };
    pb.check()?;
    let (bound, non_contractive) = contraction_bound_sq(m.lipschitz(), grid.beta())?;
    let mut diag = Diagnostics {
        contraction_bound_sq: bound,
        non_contractive,
        ..Default::default()
    };
    if non_contractive {
        let msg = format!("beta = {} does not exceed 6 L^2 = {}; the Picard map may not contract", grid.beta(), 6.0 * m.lipschitz().powi(2));
        log::warn!("{msg}");
        diag.warnings.push(msg);
    }
    if reg.fallbacks() > 0 {
        diag.warnings.push(format!("regression basis reduced at {} steps", reg.fallbacks()));
    }
    let mut cur = start;
    let mut trace = Vec::new();
    if !m.structure().has_generator {
        // Phi is identically zero: one step from any start lands on zero.
        let zero = Frozen::zeros(&reg, grid, drivers.n_marks());
        let d = distance_sq(&zero, &cur, &pb)?.sqrt();
        diag.distances.push(d);
        diag.iterations = 1;
        diag.final_residual = d;
        diag.converged = true;
        let n = grid.n_steps();
        let nb = |s: usize| reg.len(s);
        trace.push(StepFits {
            cond: (0..n).map(|s| vec![0.0; nb(s)]).collect(),
            z: (0..n).map(|s| vec![0.0; nb(s)]).collect(),
            k: (0..n).map(|s| vec![vec![0.0; nb(s)]; drivers.n_marks()]).collect(),
        });
        return Ok(BackwardSolution {
            y: zero.y.clone(),
            z: zero.z.clone(),
            k: zero.k.clone(),
            diagnostics: diag,
            regressor: reg.clone(),
            last_input: cur,
            trace,
        });
    }
    let mut last_input = cur.clone();
    for it in 1..=settings.max_iter {
        let (next, fits) = picard_map(&pb, &cur, settings)?;
        trace.push(fits);
        let d = distance_sq(&next, &cur, &pb)?.sqrt();
        if let Some(prev) = diag.distances.last() {
            if *prev > 0.0 {
                diag.ratios.push((d / prev).powi(2));
            }
        }
        diag.distances.push(d);
        diag.iterations = it;
        diag.final_residual = d;
        last_input = std::mem::replace(&mut cur, next);
        let scale = distance_sq(&cur, &zero_like(&cur), &pb)?.sqrt().max(1.0);
        let sup_change = cur.y.zip_map(&last_input.y, |a, b| a - b)?.max_abs();
        if d < settings.tol * scale && sup_change < settings.tol * cur.y.max_abs().max(1.0) {
            diag.converged = true;
            break;
        }
    }
    if !diag.converged {
        let msg = format!(
            "Picard iteration stopped after {} sweeps with residual {:.3e} above tol {:.1e}",
            diag.iterations, diag.final_residual, settings.tol
        );
        log::warn!("{msg}");
        diag.warnings.push(msg);
    }
    Ok(BackwardSolution {
        y: cur.y,
        z: cur.z,
        k: cur.k,
        diagnostics: diag,
        regressor: reg,
        last_input,
        trace,
    })
}

impl BackwardSolution {
    /// Recomputes `Y` on possibly different drivers and state from the
    /// recorded diagonal fits alone. On the original inputs this reproduces
    /// `Y` bit for bit; each `Y(t_i)` reads only the path's state at step `i`.
    pub fn replay_diagonal(&self, m: &dyn Model, grid: &TimeGrid, drivers: &DriverPaths, state: &ForwardEnsemble, u: &ControlPolicy) -> Result<PathMatrix> {
        let pb = Problem {
            model: m,
            grid,
            drivers,
            state,
            control: u,
            regressor: &self.regressor,
        };
        pb.check()?;
        let n = grid.n_steps();
        let np = drivers.n_paths();
        let nm = drivers.n_marks();
        let reg = &self.regressor;
        let mut y = PathMatrix::zeros(np, 0, n as isize);
        if !m.structure().has_generator {
            return Ok(y);
        }
        let mut z_prev: Vec<Vec<f64>> = (0..n).map(|s| vec![0.0; reg.len(s)]).collect();
        let mut k_prev: Vec<Vec<Vec<f64>>> = (0..n).map(|s| vec![vec![0.0; reg.len(s)]; nm]).collect();
        for fits in &self.trace {
            let mut next = PathMatrix::zeros(np, 0, n as isize);
            for p in 0..np {
                let mut f = vec![0.0; reg.max_len()];
                let mut kv = vec![0.0; nm];
                let mut dk = vec![0.0; nm];
                for i in 0..n {
                    let f = &mut f[..reg.len(i)];
                    reg.path_features(i, state.states(), p, f);
                    let zv = Regressor::eval(&z_prev[i], f);
                    for e in 0..nm {
                        kv[e] = Regressor::eval(&k_prev[i][e], f);
                    }
                    let v = pb.diagonal_value(p, i, f, &fits.cond[i], y.get(p, i as isize), zv, &kv, &mut dk);
                    next.set(p, i as isize, v);
                }
            }
            y = next;
            z_prev = fits.z.clone();
            k_prev = fits.k.clone();
        }
        Ok(y)
    }

    /// Mean and standard deviation of `Y(t_i)` per step.
    pub fn diagonal_summary(&self) -> Vec<(f64, f64)> {
        (0..self.y.n_steps())
            .map(|i| {
                let col = self.y.column(i as isize);
                let (mean, se) = crate::par::mean_and_se(&col);
                (mean, se * (col.len() as f64).sqrt())
            })
            .collect()
    }
}

/// Empirical contraction check over random probe pairs.
#[derive(Debug, Clone, Serialize)]
pub struct ContractionReport {
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    pub bound_sq: f64,
    pub non_contractive: bool,
    pub skipped: usize,
}

/// `||Phi(a) - Phi(b)||^2 / ||a - b||^2` for `probes` random pairs.
#[allow(clippy::too_many_arguments)]
pub fn verify_contraction(
    m: &dyn Model,
    grid: &TimeGrid,
    drivers: &DriverPaths,
    state: &ForwardEnsemble,
    u: &ControlPolicy,
    settings: &SolverSettings,
    probes: usize,
    seed: u64,
) -> Result<ContractionReport> {
    let reg = Arc::new(Regressor::fit(state.states(), grid, settings.degree));
    let pb = Problem {
        model: m,
        grid,
        drivers,
        state,
        control: u,
        regressor: &reg,
    };
    pb.check()?;
    let (bound_sq, non_contractive) = contraction_bound_sq(m.lipschitz(), grid.beta())?;
    let mut ratios = Vec::new();
    let mut skipped = 0;
    for i in 0..probes {
        let a = Frozen::random(&reg, grid, state, drivers.n_marks(), seed.wrapping_add(2 * i as u64));
        let b = Frozen::random(&reg, grid, state, drivers.n_marks(), seed.wrapping_add(2 * i as u64 + 1));
        let den = distance_sq(&a, &b, &pb)?;
        if den == 0.0 {
            skipped += 1;
            continue;
        }
        let (pa, _) = picard_map(&pb, &a, settings)?;
        let (pbm, _) = picard_map(&pb, &b, settings)?;
        ratios.push(distance_sq(&pa, &pbm, &pb)? / den);
    }
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    Ok(ContractionReport {
        ratios,
        max_ratio,
        bound_sq,
        non_contractive,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::{build_grid, sample_drivers, MarkSpace};
    use crate::forward::simulate_forward;
    use crate::models::{builtin, ControlSet, GeneratorJet, InfoStructure, KernelJet, KernelPoint, Params, RunningJet, Structure};

    /// `g = -c y + e^{-s}` on a trivial state, optionally with `t`-dependence.
    #[derive(Debug)]
    struct Deterministic {
        c: f64,
        volterra: bool,
    }

    impl Model for Deterministic {
        fn name(&self) -> &str {
            "deterministic"
        }
        fn initial(&self, _t: f64) -> (f64, f64) {
            (0.0, 0.0)
        }
        fn drift(&self, _p: &KernelPoint) -> KernelJet {
            KernelJet::default()
        }
        fn diffusion(&self, _p: &KernelPoint) -> KernelJet {
            KernelJet::default()
        }
        fn jump(&self, _p: &KernelPoint, _e: f64) -> KernelJet {
            KernelJet::default()
        }
        fn generator(&self, p: &GeneratorPoint<'_>, d_k: &mut [f64]) -> GeneratorJet {
            d_k.fill(0.0);
            let w = if self.volterra { (-(p.s - p.t)).exp() } else { 1.0 };
            GeneratorJet {
                value: -self.c * p.y + w * (-p.s).exp(),
                d_t: if self.volterra { w * (-p.s).exp() } else { 0.0 },
                d_y: -self.c,
                ..Default::default()
            }
        }
        fn running(&self, _: f64, _: f64, _: f64, _: f64, _: f64) -> RunningJet {
            RunningJet::default()
        }
        fn terminal(&self, y: f64) -> (f64, f64) {
            (y, 1.0)
        }
        fn lipschitz(&self) -> f64 {
            self.c.abs()
        }
        fn controls(&self) -> ControlSet {
            ControlSet { lo: 0.0, hi: 0.0 }
        }
        fn structure(&self) -> Structure {
            Structure {
                volterra_kernels: false,
                volterra_noise: false,
                volterra_generator: self.volterra,
                has_generator: true,
            }
        }
    }

    fn setup(m: &dyn Model, t_max: f64, n: i64, beta: f64, paths: usize) -> (TimeGrid, DriverPaths, ForwardEnsemble, ControlPolicy) {
        let grid = build_grid(t_max, n, 0, beta).unwrap();
        let dr = sample_drivers(&grid, &MarkSpace::empty(), paths, 5).unwrap();
        let u = ControlPolicy::constant(paths, &grid, 0.0, InfoStructure::Full, &m.controls()).unwrap();
        let x = simulate_forward(m, &grid, &dr, &u).unwrap();
        (grid, dr, x, u)
    }

    #[test]
    fn contraction_bound_examples() {
        assert_eq!(contraction_bound_sq(1.0, 12.0).unwrap(), (0.5, false));
        assert_eq!(contraction_bound_sq(0.0, 3.0).unwrap(), (0.0, false));
        assert_eq!(contraction_bound_sq(1.0, 6.0).unwrap(), (1.0, true));
        assert!(contraction_bound_sq(1.0, 0.0).is_err());
    }

    #[test]
    fn zero_generator_converges_in_one_step() {
        let m = builtin("zero", &Params::new()).unwrap();
        let (g, dr, x, u) = setup(m.as_ref(), 1.0, 20, 1.0, 16);
        let sol = picard_solve(m.as_ref(), &g, &dr, &x, &u, &SolverSettings::default()).unwrap();
        assert_eq!(sol.diagnostics.iterations, 1);
        assert!(sol.diagnostics.converged);
        assert_eq!(sol.y.max_abs(), 0.0);
    }

    #[test]
    fn quadrature_row_oracle() {
        let m = Deterministic { c: 0.0, volterra: false };
        let (g, dr, x, u) = setup(&m, 5.0, 500, 1.0, 4);
        let reg = Arc::new(Regressor::fit(x.states(), &g, 3));
        let pb = Problem {
            model: &m,
            grid: &g,
            drivers: &dr,
            state: &x,
            control: &u,
            regressor: &reg,
        };
        let frozen = Frozen::zeros(&reg, &g, 0);
        let (row, z, _) = solve_bsde_row(&pb, &frozen, 100).unwrap();
        for r in 100..=500 {
            let exact = (-g.time(r)).exp() - (-5.0f64).exp();
            assert!((row.get(0, r) - exact).abs() < 2.0 * g.dt());
        }
        assert!(z.iter().all(|c| c.iter().all(|v| v.abs() < 1e-12)));
    }

    #[test]
    fn constant_map_converges_in_two_steps() {
        let m = Deterministic { c: 0.0, volterra: true };
        let (g, dr, x, u) = setup(&m, 2.0, 40, 2.0, 4);
        let sol = picard_solve(&m, &g, &dr, &x, &u, &SolverSettings::default()).unwrap();
        assert_eq!(sol.diagnostics.iterations, 2);
        assert_eq!(sol.diagnostics.distances[1], 0.0);
    }

    #[test]
    fn fixed_point_ode_oracle_and_diagonal_identity() {
        for volterra in [false, true] {
            let m = Deterministic { c: 1.0, volterra };
            let (g, dr, x, u) = setup(&m, 8.0, 400, 12.0, 4);
            let sol = picard_solve(&m, &g, &dr, &x, &u, &SolverSettings::default()).unwrap();
            assert!(sol.diagnostics.converged);
            if !volterra {
                for i in 0..400 {
                    let exact = (-g.time(i)).exp() / 2.0;
                    assert!((sol.y.get(0, i) - exact).abs() < 2e-2, "step {i}: {} vs {exact}, {:?}", sol.y.get(0, i), sol.diagnostics);
                }
            }
            let pb = Problem {
                model: &m,
                grid: &g,
                drivers: &dr,
                state: &x,
                control: &u,
                regressor: &sol.regressor,
            };
            for t in [0usize, 17, 399] {
                let (row, _, _) = solve_bsde_row(&pb, &sol.last_input, t).unwrap();
                for p in 0..4 {
                    assert_eq!(row.get(p, t as isize).to_bits(), sol.y.get(p, t as isize).to_bits());
                }
            }
        }
    }

    #[test]
    fn replay_reproduces_solution_bitwise() {
        let m = builtin("sdde", &Params::new()).unwrap();
        let grid = build_grid(2.0, 40, 4, 2.0).unwrap();
        let dr = sample_drivers(&grid, &MarkSpace::empty(), 600, 8).unwrap();
        let u = ControlPolicy::constant(600, &grid, 0.1, InfoStructure::Full, &m.controls()).unwrap();
        let x = simulate_forward(m.as_ref(), &grid, &dr, &u).unwrap();
        let sol = picard_solve(m.as_ref(), &grid, &dr, &x, &u, &SolverSettings::default()).unwrap();
        let y = sol.replay_diagonal(m.as_ref(), &grid, &dr, &x, &u).unwrap();
        assert_eq!(y, sol.y);
    }

    #[test]
    fn memory_cap_is_enforced() {
        let m = Deterministic { c: 1.0, volterra: true };
        let (g, dr, x, u) = setup(&m, 1.0, 50, 12.0, 4);
        let settings = SolverSettings {
            memory_cap: 1000,
            ..Default::default()
        };
        assert!(matches!(picard_solve(&m, &g, &dr, &x, &u, &settings), Err(Error::ResourceCap(_))));
    }
}
