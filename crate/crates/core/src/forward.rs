//! Forward simulation: the direct Volterra sum, the differential-form scheme
//! and the linearized (tangent) equation.
//!
//! All schemes are path-parallel and left-point. The state includes the
//! initial segment on steps `-delay_steps..=0`, where it equals the free term.

use crate::drivers::{DriverPaths, TimeGrid};
use crate::error::{Error, Result};
use crate::models::{ControlPolicy, KernelJet, KernelPoint, Model};
use crate::paths::PathMatrix;
use rayon::prelude::*;
use std::io::Write;

/// State paths on steps `-delay_steps..=n_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardEnsemble {
    x: PathMatrix,
    delay_steps: usize,
}

impl ForwardEnsemble {
    /// Wraps a state matrix whose first step is `-delay_steps`.
    pub fn from_matrix(x: PathMatrix, delay_steps: usize) -> Result<Self> {
        if x.first_step() != -(delay_steps as isize) {
            return Err(Error::validation("state matrix must start at -delay_steps"));
        }
        Ok(Self { x, delay_steps })
    }

    pub fn states(&self) -> &PathMatrix {
        &self.x
    }

    pub fn n_paths(&self) -> usize {
        self.x.n_paths()
    }

    pub fn delay_steps(&self) -> usize {
        self.delay_steps
    }

    #[inline]
    pub fn x(&self, path: usize, step: usize) -> f64 {
        self.x.get(path, step as isize)
    }

    /// Delayed state `X(t_i - delay)`.
    #[inline]
    pub fn x1(&self, path: usize, step: usize) -> f64 {
        self.x.get(path, step as isize - self.delay_steps as isize)
    }

    /// Writes `path,t,X` rows for steps `-delay_steps..=n_steps`.
    pub fn write_csv<W: Write>(&self, grid: &TimeGrid, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["path", "t", "X"])?;
        for p in 0..self.n_paths() {
            for i in self.x.first_step()..=self.x.last_step() {
                out.write_record([p.to_string(), grid.time(i).to_string(), self.x.get(p, i).to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// `b dt + sigma dB + sum_e theta_e dN_e`, summed in that order.
#[inline]
fn kernel_increment(
    m: &dyn Model,
    marks: &[f64],
    kp: &KernelPoint,
    dt: f64,
    db: f64,
    dn: impl Fn(usize) -> f64,
    pick: impl Fn(&KernelJet) -> f64,
) -> f64 {
    let mut v = pick(&m.drift(kp)) * dt;
    v += pick(&m.diffusion(kp)) * db;
    for (e, &mark) in marks.iter().enumerate() {
        let w = dn(e);
        if w != 0.0 {
            v += pick(&m.jump(kp, mark)) * w;
        }
    }
    v
}

fn value(j: &KernelJet) -> f64 {
    j.value
}

fn check_inputs(grid: &TimeGrid, drivers: &DriverPaths) -> Result<()> {
    drivers.check_grid(grid)
}

fn non_finite(path: usize, step: usize) -> Error {
    Error::NonFinite {
        what: "forward state",
        path,
        step: step as isize,
    }
}

/// Core path loop. `control(path, step, x, x1)` yields `u_i` once `X_i` is known.
fn simulate_paths<C>(m: &dyn Model, grid: &TimeGrid, drivers: &DriverPaths, control: C) -> Result<(ForwardEnsemble, PathMatrix)>
where
    C: Fn(usize, usize, f64, f64) -> f64 + Sync,
{
    check_inputs(grid, drivers)?;
    let n = grid.n_steps();
    let d = grid.delay_steps();
    let dt = grid.dt();
    let n_paths = drivers.n_paths();
    let marks = drivers.marks().marks().to_vec();
    let markov = !m.structure().volterra_kernels;
    let mut x = PathMatrix::zeros(n_paths, -(d as isize), n as isize);
    let mut u = PathMatrix::zeros(n_paths, 0, n as isize);
    let xi: Vec<f64> = (-(d as isize)..=n as isize).map(|i| m.initial(grid.time(i)).0).collect();
    let results: Vec<Result<()>> = x
        .rows_mut()
        .zip(u.rows_mut())
        .enumerate()
        .par_bridge()
        .map(|(p, (xs, us))| {
            xs[..=d].copy_from_slice(&xi[..=d]);
            let term = |i: usize, j: usize, xs: &[f64], us: &[f64]| {
                let kp = KernelPoint {
                    t: grid.time(i as isize),
                    s: grid.time(j as isize),
                    x: xs[j + d],
                    x1: xs[j],
                    u: us[j],
                };
                kernel_increment(m, &marks, &kp, dt, drivers.db(p, j), |e| drivers.dn(p, j, e), value)
            };
            let mut running = 0.0;
            for i in 0..=n {
                if i > 0 {
                    let acc = if markov {
                        running += term(i, i - 1, xs, us);
                        running
                    } else {
                        let mut acc = 0.0;
                        for j in 0..i {
                            acc += term(i, j, xs, us);
                        }
                        acc
                    };
                    xs[i + d] = xi[i + d] + acc;
                    if !xs[i + d].is_finite() {
                        return Err(non_finite(p, i));
                    }
                }
                us[i] = control(p, i, xs[i + d], xs[i]);
            }
            Ok(())
        })
        .collect();
    results.into_iter().collect::<Result<()>>()?;
    Ok((ForwardEnsemble { x, delay_steps: d }, u))
}

/// Direct Volterra scheme
/// `X_i = xi(t_i) + sum_{j<i} [b(t_i,t_j,..) dt + sigma(t_i,t_j,..) dB_j + sum_e theta(t_i,t_j,..,e) dN_j(e)]`.
///
/// Markov kernels use a running sum with the same addition order, so the
/// result is bit-identical to the full sum.
pub fn simulate_forward(m: &dyn Model, grid: &TimeGrid, drivers: &DriverPaths, u: &ControlPolicy) -> Result<ForwardEnsemble> {
    u.check_shape(grid, drivers.n_paths())?;
    Ok(simulate_paths(m, grid, drivers, |p, i, _, _| u.get(p, i))?.0)
}

/// Simulates under a state feedback `u_i = clip_U(feedback(t_i, X_i, X1_i))`
/// and returns the ensemble with the realized control values.
pub fn simulate_feedback<F>(m: &dyn Model, grid: &TimeGrid, drivers: &DriverPaths, feedback: F) -> Result<(ForwardEnsemble, PathMatrix)>
where
    F: Fn(f64, f64, f64) -> f64 + Sync,
{
    let set = m.controls();
    simulate_paths(m, grid, drivers, |_, i, x, x1| set.clip(feedback(grid.time(i as isize), x, x1)))
}

/// Correction integrals of the differential form at step `i` for one path:
/// `(sum_j db/dt dt, sum_j dsigma/dt dB_j, sum_j sum_e dtheta/dt dN_j(e))`.
fn corrections(m: &dyn Model, grid: &TimeGrid, drivers: &DriverPaths, marks: &[f64], p: usize, i: usize, xs: &[f64], us: &[f64]) -> [f64; 3] {
    let d = grid.delay_steps();
    let dt = grid.dt();
    let mut c = [0.0; 3];
    for j in 0..i {
        let kp = KernelPoint {
            t: grid.time(i as isize),
            s: grid.time(j as isize),
            x: xs[j + d],
            x1: xs[j],
            u: us[j],
        };
        c[0] += m.drift(&kp).d_t * dt;
        c[1] += m.diffusion(&kp).d_t * drivers.db(p, j);
        for (e, &mark) in marks.iter().enumerate() {
            let w = drivers.dn(p, j, e);
            if w != 0.0 {
                c[2] += m.jump(&kp, mark).d_t * w;
            }
        }
    }
    c
}

/// Differential-form scheme: steps
/// `dX = xi' dt + b(t,t,..) dt + sigma(t,t,..) dB + theta(t,t,..) dN + (Volterra corrections) dt`
/// with the corrections
/// accumulated over the past. Markov kernels skip the corrections, which
/// vanish identically for them.
pub fn simulate_forward_differential(m: &dyn Model, grid: &TimeGrid, drivers: &DriverPaths, u: &ControlPolicy) -> Result<ForwardEnsemble> {
    check_inputs(grid, drivers)?;
    u.check_shape(grid, drivers.n_paths())?;
    let n = grid.n_steps();
    let d = grid.delay_steps();
    let dt = grid.dt();
    let marks = drivers.marks().marks().to_vec();
    let volterra = m.structure().volterra_kernels;
    let mut x = PathMatrix::zeros(drivers.n_paths(), -(d as isize), n as isize);
    let results: Vec<Result<()>> = x
        .rows_mut()
        .enumerate()
        .par_bridge()
        .map(|(p, xs)| {
            for i in 0..=d {
                xs[i] = m.initial(grid.time(i as isize - d as isize)).0;
            }
            let us: Vec<f64> = (0..=n).map(|i| u.get(p, i)).collect();
            for i in 0..n {
                let t = grid.time(i as isize);
                let kp = KernelPoint {
                    t,
                    s: t,
                    x: xs[i + d],
                    x1: xs[i],
                    u: us[i],
                };
                let c = if volterra {
                    corrections(m, grid, drivers, &marks, p, i, xs, &us)
                } else {
                    [0.0; 3]
                };
                let mut next = xs[i + d];
                next += m.initial(t).1 * dt;
                next += m.drift(&kp).value * dt;
                next += c[0] * dt;
                next += m.diffusion(&kp).value * drivers.db(p, i);
                next += c[1] * dt;
                for (e, &mark) in marks.iter().enumerate() {
                    let w = drivers.dn(p, i, e);
                    if w != 0.0 {
                        next += m.jump(&kp, mark).value * w;
                    }
                }
                next += c[2] * dt;
                if !next.is_finite() {
                    return Err(non_finite(p, i + 1));
                }
                xs[i + 1 + d] = next;
            }
            Ok(())
        })
        .collect();
    results.into_iter().collect::<Result<()>>()?;
    Ok(ForwardEnsemble { x, delay_steps: d })
}

/// Largest absolute Volterra correction integral over all paths and steps,
/// evaluated along a given ensemble. Zero exactly for Markov kernels.
pub fn max_volterra_correction(m: &dyn Model, grid: &TimeGrid, drivers: &DriverPaths, u: &ControlPolicy, ens: &ForwardEnsemble) -> f64 {
    let d = grid.delay_steps();
    let marks = drivers.marks().marks().to_vec();
    (0..drivers.n_paths())
        .into_par_iter()
        .map(|p| {
            let xs: Vec<f64> = (-(d as isize)..=grid.n_steps() as isize).map(|i| ens.x.get(p, i)).collect();
            let us: Vec<f64> = (0..=grid.n_steps()).map(|i| u.get(p, i)).collect();
            (0..grid.n_steps())
                .map(|i| corrections(m, grid, drivers, &marks, p, i, &xs, &us).iter().fold(0.0f64, |a, v| a.max(v.abs())))
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max)
}

/// Tangent of the direct scheme in the control direction `direction`:
/// `dX_i = sum_{j<i} [K_x dX_j + K_x1 dX_{j-d} + K_u beta_j]` over each kernel
/// increment, with `dX = 0` on the initial segment.
pub fn simulate_linearized_forward(
    m: &dyn Model,
    grid: &TimeGrid,
    drivers: &DriverPaths,
    u: &ControlPolicy,
    direction: &PathMatrix,
    base: &ForwardEnsemble,
) -> Result<PathMatrix> {
    check_inputs(grid, drivers)?;
    u.check_shape(grid, drivers.n_paths())?;
    let n = grid.n_steps();
    let d = grid.delay_steps();
    let dt = grid.dt();
    if direction.n_paths() != drivers.n_paths() || direction.first_step() != 0 || direction.last_step() < n as isize - 1 {
        return Err(Error::validation("direction must cover steps 0..n_steps on every path"));
    }
    if base.n_paths() != drivers.n_paths() || base.x.last_step() != n as isize || base.delay_steps != d {
        return Err(Error::validation("base ensemble does not match the grid and drivers"));
    }
    let marks = drivers.marks().marks().to_vec();
    let markov = !m.structure().volterra_kernels;
    let mut out = PathMatrix::zeros(drivers.n_paths(), -(d as isize), n as isize);
    let results: Vec<Result<()>> = out
        .rows_mut()
        .enumerate()
        .par_bridge()
        .map(|(p, dx)| {
            let term = |i: usize, j: usize, dx: &[f64]| {
                let kp = KernelPoint {
                    t: grid.time(i as isize),
                    s: grid.time(j as isize),
                    x: base.x(p, j),
                    x1: base.x1(p, j),
                    u: u.get(p, j),
                };
                let (a, a1, b) = (dx[j + d], dx[j], direction.get(p, j as isize));
                kernel_increment(m, &marks, &kp, dt, drivers.db(p, j), |e| drivers.dn(p, j, e), |k| {
                    k.d_x * a + k.d_x1 * a1 + k.d_u * b
                })
            };
            let mut running = 0.0;
            for i in 1..=n {
                let acc = if markov {
                    running += term(i, i - 1, dx);
                    running
                } else {
                    let mut acc = 0.0;
                    for j in 0..i {
                        acc += term(i, j, dx);
                    }
                    acc
                };
                if !acc.is_finite() {
                    return Err(Error::NonFinite {
                        what: "linearized state",
                        path: p,
                        step: i as isize,
                    });
                }
                dx[i + d] = acc;
            }
            Ok(())
        })
        .collect();
    results.into_iter().collect::<Result<()>>()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::{build_grid, sample_drivers, MarkSpace};
    use crate::models::{builtin, InfoStructure, Params};

    fn policy(m: &dyn Model, grid: &TimeGrid, n: usize, u: f64) -> ControlPolicy {
        ControlPolicy::constant(n, grid, u, InfoStructure::Full, &m.controls()).unwrap()
    }

    #[test]
    fn zero_model_stays_at_free_term() {
        let grid = build_grid(1.0, 20, 3, 1.0).unwrap();
        let m = builtin("zero", &Params::new()).unwrap();
        let dr = sample_drivers(&grid, &MarkSpace::empty(), 8, 1).unwrap();
        let ens = simulate_forward(m.as_ref(), &grid, &dr, &policy(m.as_ref(), &grid, 8, 0.0)).unwrap();
        assert_eq!(ens.states().max_abs(), 0.0);
    }

    #[test]
    fn initial_segment_is_exact() {
        let grid = build_grid(2.0, 40, 5, 1.0).unwrap();
        let m = builtin("sdde", &Params::from([("x0".into(), 0.37)])).unwrap();
        let dr = sample_drivers(&grid, &MarkSpace::empty(), 16, 2).unwrap();
        let ens = simulate_forward(m.as_ref(), &grid, &dr, &policy(m.as_ref(), &grid, 16, 0.1)).unwrap();
        for p in 0..16 {
            for i in -5..=0 {
                assert_eq!(ens.states().get(p, i), 0.37);
            }
        }
    }

    #[test]
    fn det_volterra_matches_fixed_point_quadrature() {
        let grid = build_grid(5.0, 100, 0, 1.0).unwrap();
        let m = builtin("det_volterra", &Params::new()).unwrap();
        let dr = sample_drivers(&grid, &MarkSpace::empty(), 2, 3).unwrap();
        let ens = simulate_forward(m.as_ref(), &grid, &dr, &policy(m.as_ref(), &grid, 2, 0.0)).unwrap();
        // Independent oracle: Picard iteration of the discrete second-kind equation.
        let (a, gamma, dt) = (-0.5f64, 1.0f64, grid.dt());
        let mut xs = vec![1.0; 101];
        for _ in 0..200 {
            let prev = xs.clone();
            for i in 0..=100 {
                xs[i] = 1.0 + (0..i).map(|j| a * (-gamma * (i - j) as f64 * dt).exp() * prev[j] * dt).sum::<f64>();
            }
        }
        for i in 0..=100 {
            assert!((ens.x(0, i) - xs[i]).abs() <= 1e-10, "step {i}");
        }
    }

    #[test]
    fn no_lookahead_is_bitwise() {
        let marks = MarkSpace::new(vec![1.0], vec![2.0]).unwrap();
        let grid = build_grid(1.0, 30, 4, 1.0).unwrap();
        let m = builtin("jump_linear", &Params::new()).unwrap();
        let dr = sample_drivers(&grid, &marks, 32, 9).unwrap();
        let u = policy(m.as_ref(), &grid, 32, 0.2);
        let full = simulate_forward(m.as_ref(), &grid, &dr, &u).unwrap();
        for cut in [0usize, 7, 29] {
            let cutd = dr.with_future_zeroed(cut);
            let ens = simulate_forward(m.as_ref(), &grid, &cutd, &u).unwrap();
            for p in 0..32 {
                for i in -4..=cut as isize {
                    assert_eq!(ens.states().get(p, i).to_bits(), full.states().get(p, i).to_bits());
                }
            }
        }
    }

    #[test]
    fn unit_drift_reproduces_time() {
        #[derive(Debug)]
        struct UnitDrift;
        impl Model for UnitDrift {
            fn name(&self) -> &str {
                "unit"
            }
            fn initial(&self, _t: f64) -> (f64, f64) {
                (0.0, 0.0)
            }
            fn drift(&self, _p: &KernelPoint) -> KernelJet {
                KernelJet { value: 1.0, ..Default::default() }
            }
            fn diffusion(&self, _p: &KernelPoint) -> KernelJet {
                KernelJet::default()
            }
            fn jump(&self, _p: &KernelPoint, _e: f64) -> KernelJet {
                KernelJet::default()
            }
            fn generator(&self, _p: &crate::models::GeneratorPoint<'_>, _d: &mut [f64]) -> crate::models::GeneratorJet {
                Default::default()
            }
            fn running(&self, _: f64, _: f64, _: f64, _: f64, _: f64) -> crate::models::RunningJet {
                Default::default()
            }
            fn terminal(&self, _y: f64) -> (f64, f64) {
                (0.0, 0.0)
            }
            fn lipschitz(&self) -> f64 {
                0.0
            }
            fn controls(&self) -> crate::models::ControlSet {
                crate::models::ControlSet { lo: 0.0, hi: 0.0 }
            }
            fn structure(&self) -> crate::models::Structure {
                Default::default()
            }
        }
        let grid = build_grid(1.0, 8, 0, 1.0).unwrap();
        let dr = sample_drivers(&grid, &MarkSpace::empty(), 3, 1).unwrap();
        let u = policy(&UnitDrift, &grid, 3, 0.0);
        let a = simulate_forward(&UnitDrift, &grid, &dr, &u).unwrap();
        let b = simulate_forward_differential(&UnitDrift, &grid, &dr, &u).unwrap();
        for i in 0..=8 {
            assert!((a.x(1, i) - grid.time(i as isize)).abs() < 1e-15);
            assert!((b.x(1, i) - grid.time(i as isize)).abs() < 1e-15);
        }
    }

    #[test]
    fn linearized_matches_central_difference() {
        let marks = MarkSpace::new(vec![0.5], vec![1.5]).unwrap();
        let grid = build_grid(1.0, 25, 3, 1.0).unwrap();
        for (name, params) in [
            ("jump_linear", Params::new()),
            ("sdde", Params::new()),
            ("det_volterra", Params::from([("control_gain".into(), 1.0)])),
        ] {
            let m = builtin(name, &params).unwrap();
            let dr = sample_drivers(&grid, &marks, 20, 4).unwrap();
            let np = 20;
            let dir = PathMatrix::from_rows(0, (0..np).map(|p| (0..=25).map(|i| ((p * 7 + i) as f64).sin()).collect()).collect()).unwrap();
            let base_vals = PathMatrix::filled(np, 0, 25, 0.1);
            let mk = |eps: f64| {
                let v = base_vals.zip_map(&dir, |a, b| a + eps * b).unwrap();
                ControlPolicy::new(v, InfoStructure::Full, &m.controls()).unwrap()
            };
            let base = simulate_forward(m.as_ref(), &grid, &dr, &mk(0.0)).unwrap();
            let tangent = simulate_linearized_forward(m.as_ref(), &grid, &dr, &mk(0.0), &dir, &base).unwrap();
            let eps = 1e-4;
            let up = simulate_forward(m.as_ref(), &grid, &dr, &mk(eps)).unwrap();
            let dn = simulate_forward(m.as_ref(), &grid, &dr, &mk(-eps)).unwrap();
            for p in 0..np {
                for i in 0..=25 {
                    let fd = (up.x(p, i) - dn.x(p, i)) / (2.0 * eps);
                    assert!((tangent.get(p, i as isize) - fd).abs() < 1e-6, "{name} p{p} i{i}");
                }
            }
            let doubled = simulate_linearized_forward(m.as_ref(), &grid, &dr, &mk(0.0), &dir.map(|v| 2.0 * v), &base).unwrap();
            for (a, b) in doubled.as_slice().iter().zip(tangent.as_slice()) {
                assert!((a - 2.0 * b).abs() <= 1e-12 * a.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn control_free_model_has_zero_tangent() {
        let grid = build_grid(1.0, 10, 0, 1.0).unwrap();
        let m = builtin("det_volterra", &Params::new()).unwrap();
        let dr = sample_drivers(&grid, &MarkSpace::empty(), 4, 4).unwrap();
        let u = policy(m.as_ref(), &grid, 4, 0.0);
        let base = simulate_forward(m.as_ref(), &grid, &dr, &u).unwrap();
        let dir = PathMatrix::filled(4, 0, 10, 1.0);
        let t = simulate_linearized_forward(m.as_ref(), &grid, &dr, &u, &dir, &base).unwrap();
        assert_eq!(t.max_abs(), 0.0);
    }
}
