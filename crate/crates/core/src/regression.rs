//! Cross-sectional least-squares regression on polynomial bases of the state.
//!
//! Each grid step owns a basis of monomials in the standardized pair
//! `(X(s), X(s - delay))` up to a configurable total degree. A fitted
//! conditional expectation is a coefficient vector; evaluating it on a path
//! only reads that path's state at the conditioning step.

use crate::drivers::TimeGrid;
use crate::par::chunked_sum;
use crate::paths::PathMatrix;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Smallest accepted pivot of the Gram Cholesky factor relative to its diagonal.
const PIVOT_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone)]
struct Variable {
    delayed: bool,
    mean: f64,
    scale: f64,
}

#[derive(Debug, Clone)]
struct StepBasis {
    vars: Vec<Variable>,
    exponents: Vec<[u8; 2]>,
    gram: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl StepBasis {
    fn intercept() -> Self {
        let g = DMatrix::from_element(1, 1, 1.0);
        Self {
            vars: Vec::new(),
            exponents: vec![[0, 0]],
            gram: vec![1.0],
            chol: Cholesky::new(g).expect("1x1 identity"),
        }
    }
}

fn exponents(n_vars: usize, degree: usize) -> Vec<[u8; 2]> {
    let mut out = Vec::new();
    for d in 0..=degree {
        for e0 in (0..=d).rev() {
            let e1 = d - e0;
            if n_vars == 0 && d > 0 || n_vars == 1 && e1 > 0 {
                continue;
            }
            out.push([e0 as u8, e1 as u8]);
        }
    }
    out
}

/// Largest supported total degree.
pub const MAX_DEGREE: usize = 6;
/// Basis size at [`MAX_DEGREE`] with two state variables.
pub const MAX_BASIS: usize = (MAX_DEGREE + 1) * (MAX_DEGREE + 2) / 2;

/// Per-step regression bases fitted to one forward ensemble.
#[derive(Debug, Clone)]
pub struct Regressor {
    steps: Vec<StepBasis>,
    n_paths: usize,
    delay_steps: usize,
    degree: usize,
    fallbacks: usize,
}

impl Regressor {
    /// Intercept-only bases: conditional expectations become path averages.
    pub fn constant(grid: &TimeGrid, n_paths: usize) -> Self {
        Self {
            steps: vec![StepBasis::intercept(); grid.n_steps() + 1],
            n_paths,
            delay_steps: grid.delay_steps(),
            degree: 0,
            fallbacks: 0,
        }
    }

    /// Fits bases for steps `0..=n_steps` to the state `x` (steps from
    /// `-delay_steps`). Degenerate designs fall back to lower degrees.
    pub fn fit(x: &PathMatrix, grid: &TimeGrid, degree: usize) -> Self {
        if degree > MAX_DEGREE {
            log::warn!("regression degree {degree} clamped to {MAX_DEGREE}");
        }
        let degree = degree.min(MAX_DEGREE);
        let n_paths = x.n_paths();
        let d = grid.delay_steps();
        let mut fallbacks = 0;
        let steps = (0..=grid.n_steps())
            .map(|s| {
                let (basis, fell_back) = Self::step_basis(x, s, d, degree);
                if fell_back {
                    fallbacks += 1;
                }
                basis
            })
            .collect();
        if fallbacks > 0 {
            log::warn!("regression basis reduced below degree {degree} at {fallbacks} steps");
        }
        Self {
            steps,
            n_paths,
            delay_steps: d,
            degree,
            fallbacks,
        }
    }

    fn step_basis(x: &PathMatrix, s: usize, d: usize, degree: usize) -> (StepBasis, bool) {
        let n = x.n_paths();
        let mut vars = Vec::new();
        let candidates: &[bool] = if d == 0 { &[false] } else { &[false, true] };
        for &delayed in candidates {
            let step = s as isize - if delayed { d as isize } else { 0 };
            let sums = chunked_sum(n, 1, |r, acc| {
                for p in r {
                    acc[0] += x.get(p, step);
                }
            });
            let mean = sums[0] / n as f64;
            let ss = chunked_sum(n, 1, |r, acc| {
                for p in r {
                    let v = x.get(p, step) - mean;
                    acc[0] += v * v;
                }
            });
            let sd = (ss[0] / n as f64).sqrt();
            if sd > 1e-12 * mean.abs().max(1.0) {
                vars.push(Variable { delayed, mean, scale: sd });
            }
        }
        let mut deg = if vars.is_empty() { 0 } else { degree };
        let wanted = exponents(vars.len(), degree).len();
        loop {
            let exps = exponents(vars.len(), deg);
            let nb = exps.len();
            if nb > n {
                deg -= 1;
                continue;
            }
            let probe = StepBasis {
                vars: vars.clone(),
                exponents: exps.clone(),
                gram: Vec::new(),
                chol: StepBasis::intercept().chol,
            };
            let sums = chunked_sum(n, nb * nb, |r, acc| {
                let mut f = vec![0.0; nb];
                for p in r {
                    probe.features(x.get(p, s as isize), x.get(p, s as isize - d as isize), &mut f);
                    for a in 0..nb {
                        for b in 0..nb {
                            acc[a * nb + b] += f[a] * f[b];
                        }
                    }
                }
            });
            let gram: Vec<f64> = sums.iter().map(|v| v / n as f64).collect();
            let g = DMatrix::from_row_slice(nb, nb, &gram);
            let max_diag = (0..nb).fold(0.0f64, |m, i| m.max(gram[i * nb + i]));
            if let Some(chol) = Cholesky::new(g) {
                let l = chol.l_dirty();
                let ok = (0..nb).all(|i| l[(i, i)] * l[(i, i)] > PIVOT_FLOOR * max_diag);
                if ok {
                    return (
                        StepBasis {
                            vars,
                            exponents: exps,
                            gram,
                            chol,
                        },
                        nb < wanted,
                    );
                }
            }
            if deg == 0 {
                // Constant design is always full rank; reaching here means no paths vary.
                return (StepBasis::intercept(), wanted > 1);
            }
            deg -= 1;
        }
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len() - 1
    }

    /// Number of steps whose basis fell below the requested degree.
    pub fn fallbacks(&self) -> usize {
        self.fallbacks
    }

    /// Basis size at step `s`.
    pub fn len(&self, s: usize) -> usize {
        self.steps[s].exponents.len()
    }

    /// Largest basis size over all steps.
    pub fn max_len(&self) -> usize {
        self.steps.iter().map(|b| b.exponents.len()).max().unwrap_or(1)
    }

    /// Features at step `s` for state values `(x, x1)`.
    #[inline]
    pub fn features(&self, s: usize, x: f64, x1: f64, out: &mut [f64]) {
        self.steps[s].features(x, x1, out)
    }

    /// Features of `path` at step `s`, reading the ensemble state.
    #[inline]
    pub fn path_features(&self, s: usize, x: &PathMatrix, path: usize, out: &mut [f64]) {
        let si = s as isize;
        self.features(s, x.get(path, si), x.get(path, si - self.delay_steps as isize), out)
    }

    /// `sum_k c_k phi_k`.
    #[inline]
    pub fn eval(coeffs: &[f64], feats: &[f64]) -> f64 {
        let mut v = 0.0;
        for (c, f) in coeffs.iter().zip(feats) {
            v += c * f;
        }
        v
    }

    /// Least-squares fits at step `s` of `n_rhs` right-hand sides, each given
    /// per path by `rhs(path, out)`. Returns one coefficient vector per rhs.
    pub fn project_many<F>(&self, s: usize, x: &PathMatrix, n_rhs: usize, rhs: F) -> Vec<Vec<f64>>
    where
        F: Fn(usize, &mut [f64]) + Sync,
    {
        assert_eq!(x.n_paths(), self.n_paths, "regressor fitted on a different ensemble size");
        let nb = self.len(s);
        let sums = chunked_sum(self.n_paths, nb * n_rhs, |r, acc| {
            let mut f = vec![0.0; nb];
            let mut v = vec![0.0; n_rhs];
            for p in r {
                self.path_features(s, x, p, &mut f);
                rhs(p, &mut v);
                for (j, vj) in v.iter().enumerate() {
                    if *vj != 0.0 {
                        for (k, fk) in f.iter().enumerate() {
                            acc[j * nb + k] += fk * vj;
                        }
                    }
                }
            }
        });
        let inv_n = 1.0 / self.n_paths as f64;
        (0..n_rhs)
            .map(|j| {
                let b = DVector::from_iterator(nb, sums[j * nb..(j + 1) * nb].iter().map(|v| v * inv_n));
                self.steps[s].chol.solve(&b).iter().copied().collect()
            })
            .collect()
    }

    /// Single-rhs convenience wrapper around [`Regressor::project_many`].
    pub fn project(&self, s: usize, x: &PathMatrix, values: &[f64]) -> Vec<f64> {
        self.project_many(s, x, 1, |p, out| out[0] = values[p]).pop().unwrap()
    }

    /// Path average of the squared fitted function: `c^T G c`.
    pub fn mean_square(&self, s: usize, coeffs: &[f64]) -> f64 {
        let b = &self.steps[s];
        let nb = b.exponents.len();
        let mut v = 0.0;
        for a in 0..nb {
            let mut row = 0.0;
            for c in 0..nb {
                row += b.gram[a * nb + c] * coeffs[c];
            }
            v += coeffs[a] * row;
        }
        v.max(0.0)
    }
}

impl StepBasis {
    #[inline]
    fn features(&self, x: f64, x1: f64, out: &mut [f64]) {
        let mut v = [0.0f64; 2];
        for (i, var) in self.vars.iter().enumerate() {
            let raw = if var.delayed { x1 } else { x };
            v[i] = (raw - var.mean) / var.scale;
        }
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = powi(v[0], e[0]) * powi(v[1], e[1]);
        }
    }
}

#[inline]
fn powi(x: f64, e: u8) -> f64 {
    match e {
        0 => 1.0,
        1 => x,
        2 => x * x,
        3 => x * x * x,
        _ => x.powi(e as i32),
    }
}
