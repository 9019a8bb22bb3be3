//! Time grids, finite mark spaces, counter-based random drivers and the
//! discrete weighted norm over the triangle.

use crate::error::{Error, Result};
use crate::field::TriangularField;
use crate::paths::PathMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Truncated uniform grid `t_i = i dt`, `i = -delay_steps..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_max: f64,
    n_steps: usize,
    dt: f64,
    delay_steps: usize,
    beta: f64,
}

/// Validates and builds a grid.
pub fn build_grid(t_max: f64, n_steps: i64, delay_steps: i64, beta: f64) -> Result<TimeGrid> {
    if !(t_max.is_finite() && t_max > 0.0) {
        return Err(Error::validation(format!("t_max must be positive, got {t_max}")));
    }
    if n_steps < 1 {
        return Err(Error::validation(format!("n_steps must be at least 1, got {n_steps}")));
    }
    if delay_steps < 0 {
        return Err(Error::validation(format!(
            "delay_steps must be nonnegative, got {delay_steps}"
        )));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::validation(format!("beta must be positive, got {beta}")));
    }
    Ok(TimeGrid {
        t_max,
        n_steps: n_steps as usize,
        dt: t_max / n_steps as f64,
        delay_steps: delay_steps as usize,
        beta,
    })
}

impl TimeGrid {
    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn delay_steps(&self) -> usize {
        self.delay_steps
    }

    pub fn delay(&self) -> f64 {
        self.delay_steps as f64 * self.dt
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    #[inline]
    pub fn time(&self, i: isize) -> f64 {
        i as f64 * self.dt
    }

    /// `e^{beta t_i}`.
    #[inline]
    pub fn weight(&self, i: usize) -> f64 {
        (self.beta * self.time(i as isize)).exp()
    }

    /// Grid index nearest to `t`, clamped to `0..=n_steps`.
    pub fn index_of(&self, t: f64) -> usize {
        ((t / self.dt).round().max(0.0) as usize).min(self.n_steps)
    }

    /// Same grid with a different weight exponent.
    pub fn with_beta(&self, beta: f64) -> Result<TimeGrid> {
        build_grid(self.t_max, self.n_steps as i64, self.delay_steps as i64, beta)
    }
}

/// Finite jump-mark space with intensities `nu_i`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MarkSpace {
    marks: Vec<f64>,
    intensities: Vec<f64>,
}

impl MarkSpace {
    pub fn new(marks: Vec<f64>, intensities: Vec<f64>) -> Result<Self> {
        if marks.len() != intensities.len() {
            return Err(Error::validation("marks and intensities differ in length"));
        }
        for (i, e) in marks.iter().enumerate() {
            if !e.is_finite() || *e == 0.0 {
                return Err(Error::validation(format!("mark {i} must be finite and nonzero")));
            }
            if marks[..i].contains(e) {
                return Err(Error::validation(format!("mark {e} repeated")));
            }
        }
        if intensities.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::validation("intensities must be finite and nonnegative"));
        }
        Ok(Self { marks, intensities })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.marks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marks.is_empty()
    }

    pub fn marks(&self) -> &[f64] {
        &self.marks
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn total_intensity(&self) -> f64 {
        self.intensities.iter().sum()
    }

    /// `sum_i nu_i k_i^2`.
    pub fn norm_sq(&self, k: &[f64]) -> f64 {
        self.intensities.iter().zip(k).map(|(nu, v)| nu * v * v).sum()
    }
}

/// Brownian increments and Poisson counts per path, step and mark.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverPaths {
    n_paths: usize,
    n_steps: usize,
    seed: u64,
    marks: MarkSpace,
    nu_dt: Vec<f64>,
    brownian: Vec<f64>,
    counts: Vec<u32>,
}

/// 64-bit words consumed per step: two for the Gaussian, one per mark.
fn words_per_step(n_marks: usize) -> u128 {
    2 * (2 + n_marks as u128)
}

fn unit_open(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64)
}

fn unit_half_open(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Poisson draw by inversion of a single uniform.
fn poisson_inverse(mean: f64, u: f64) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    let mut k = 0u32;
    let mut p = (-mean).exp();
    let mut cdf = p;
    while u >= cdf && k < 10_000 {
        k += 1;
        p *= mean / k as f64;
        let next = cdf + p;
        if next == cdf {
            break;
        }
        cdf = next;
    }
    k
}

/// Draws driver paths. Path `i` uses ChaCha stream `i`, and each step starts at
/// a fixed word offset, so every value depends only on (seed, path, step, mark).
pub fn sample_drivers(grid: &TimeGrid, marks: &MarkSpace, n_paths: usize, seed: u64) -> Result<DriverPaths> {
    if n_paths == 0 {
        return Err(Error::validation("n_paths must be positive"));
    }
    let n = grid.n_steps();
    let m = marks.len();
    let dt = grid.dt();
    let sd = dt.sqrt();
    let nu_dt: Vec<f64> = marks.intensities().iter().map(|nu| nu * dt).collect();
    let mut brownian = vec![0.0; n_paths * n];
    let mut counts = vec![0u32; n_paths * n * m];
    let stride = words_per_step(m);
    let fill = |path: usize, db: &mut [f64], dn: &mut [u32]| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path as u64);
        for step in 0..n {
            rng.set_word_pos(step as u128 * stride);
            let u1 = unit_open(rng.next_u64());
            let u2 = unit_half_open(rng.next_u64());
            db[step] = sd * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            for e in 0..m {
                let u = unit_half_open(rng.next_u64());
                dn[step * m + e] = poisson_inverse(nu_dt[e], u);
            }
        }
    };
    if m == 0 {
        brownian
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(path, db)| fill(path, db, &mut []));
    } else {
        brownian
            .par_chunks_mut(n)
            .zip(counts.par_chunks_mut(n * m))
            .enumerate()
            .for_each(|(path, (db, dn))| fill(path, db, dn));
    }
    Ok(DriverPaths {
        n_paths,
        n_steps: n,
        seed,
        marks: marks.clone(),
        nu_dt,
        brownian,
        counts,
    })
}

impl DriverPaths {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_marks(&self) -> usize {
        self.marks.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn marks(&self) -> &MarkSpace {
        &self.marks
    }

    #[inline]
    pub fn db(&self, path: usize, step: usize) -> f64 {
        self.brownian[path * self.n_steps + step]
    }

    #[inline]
    pub fn count(&self, path: usize, step: usize, mark: usize) -> u32 {
        self.counts[(path * self.n_steps + step) * self.marks.len() + mark]
    }

    /// Compensated increment `count - nu dt`.
    #[inline]
    pub fn dn(&self, path: usize, step: usize, mark: usize) -> f64 {
        self.count(path, step, mark) as f64 - self.nu_dt[mark]
    }

    /// Brownian level `B(t_i)` accumulated from the increments.
    pub fn brownian_level(&self, path: usize, step: usize) -> f64 {
        let mut w = 0.0;
        for j in 0..step {
            w += self.db(path, j);
        }
        w
    }

    /// Copy with every increment at steps `>= step` set to zero (Brownian
    /// increments and jump counts), used for no-lookahead checks.
    pub fn with_future_zeroed(&self, step: usize) -> DriverPaths {
        let mut out = self.clone();
        let m = self.marks.len();
        for p in 0..self.n_paths {
            for j in step..self.n_steps {
                out.brownian[p * self.n_steps + j] = 0.0;
                for e in 0..m {
                    out.counts[(p * self.n_steps + j) * m + e] = 0;
                }
            }
        }
        out
    }

    pub fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if self.n_steps != grid.n_steps() {
            return Err(Error::validation(format!(
                "drivers have {} steps, grid has {}",
                self.n_steps,
                grid.n_steps()
            )));
        }
        let dt = grid.dt();
        for (e, nu) in self.marks.intensities().iter().enumerate() {
            if self.nu_dt[e] != nu * dt {
                return Err(Error::validation("drivers were sampled on a different dt"));
            }
        }
        Ok(())
    }
}

/// Discrete `||(Y, Z, K)||^2` with weights `e^{beta t}` on `Y` and `e^{beta s}`
/// on the triangle `t <= s`, left Riemann sums, expectation as path average.
pub fn weighted_norm_sq(
    y: &PathMatrix,
    z: &TriangularField,
    k: &TriangularField,
    grid: &TimeGrid,
    marks: &MarkSpace,
) -> Result<f64> {
    let n = grid.n_steps();
    if y.first_step() > 0 || y.last_step() < n as isize - 1 {
        return Err(Error::validation("Y does not cover steps 0..n_steps"));
    }
    if z.n_steps() != n || k.n_steps() != n {
        return Err(Error::validation("triangular field does not match the grid"));
    }
    if z.n_components() != 1 || k.n_components() != marks.len().max(1) {
        return Err(Error::validation("field components do not match the mark space"));
    }
    Ok(process_norm_sq(y, grid) + z.weighted_norm_sq(grid, None)? + k.weighted_norm_sq(grid, Some(marks))?)
}

/// `E sum_i e^{beta t_i} Y_i^2 dt` over `i = 0..n_steps`.
pub fn process_norm_sq(y: &PathMatrix, grid: &TimeGrid) -> f64 {
    let n = grid.n_steps();
    let weights: Vec<f64> = (0..n).map(|i| grid.weight(i) * grid.dt()).collect();
    let sums = crate::par::chunked_sum(y.n_paths(), 1, |r, acc| {
        for p in r {
            let mut s = 0.0;
            for (i, w) in weights.iter().enumerate() {
                let v = y.get(p, i as isize);
                s += w * v * v;
            }
            acc[0] += s;
        }
    });
    sums[0] / y.n_paths() as f64
}
