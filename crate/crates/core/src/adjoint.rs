//! Hamiltonian evaluation and the adjoint system.
//!
//! `H = H0 + H1`, where `H0` collects the diagonal coefficients against the
//! adjoints and `H1` the memory terms: first-argument differences of the
//! forward kernels against future `p`, `q`, `r`, and of the generator against
//! past `lambda`. First-argument derivatives are grid forward differences
//! `[k(t_{m+1}, t_i) - k(t_m, t_i)] / dt`.
//!
//! `lambda` runs forward from `h'(Y(0))`; its drift uses the implicit value
//! `lambda_bar_i = lambda_i + H_y(i) dt`, which makes the scheme the exact
//! discrete dual of the backward recursion. `p` runs backward from zero with
//! `q`, `r` identified by martingale-increment regression.

use crate::bsvie::BackwardSolution;
use crate::drivers::{DriverPaths, MarkSpace, TimeGrid};
use crate::error::{Error, Result};
use crate::field::{Conditioning, TriangularField};
use crate::forward::ForwardEnsemble;
use crate::models::{ControlPolicy, GeneratorJet, GeneratorPoint, KernelJet, KernelPoint, Model};
use crate::paths::PathMatrix;
use crate::regression::{Regressor, MAX_BASIS};
use rayon::prelude::*;
use serde::Serialize;

/// Point at which the Hamiltonian is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct HArgs {
    pub x: f64,
    pub x1: f64,
    pub y: f64,
    pub z: f64,
    pub k: Vec<f64>,
    pub u: f64,
}

/// Partial derivatives of `H` (or one of its parts).
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Partials {
    pub x: f64,
    pub x1: f64,
    pub y: f64,
    pub z: f64,
    pub u: f64,
    pub k: Vec<f64>,
}

impl Partials {
    pub fn zeros(n_marks: usize) -> Self {
        Self {
            k: vec![0.0; n_marks],
            ..Default::default()
        }
    }

    fn add(&mut self, o: &Partials) {
        self.x += o.x;
        self.x1 += o.x1;
        self.y += o.y;
        self.z += o.z;
        self.u += o.u;
        for (a, b) in self.k.iter_mut().zip(&o.k) {
            *a += b;
        }
    }
}

/// `H0`, the six `H1` terms, their sum and the analytic partials.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HamiltonianEval {
    pub h0: f64,
    /// Forward `b`, `sigma`, `theta` terms, then generator `s`, `z`, `k` terms.
    pub h1: [f64; 6],
    pub h: f64,
    pub partials: Partials,
}

fn kernel_diff(a: KernelJet, b: KernelJet) -> KernelJet {
    KernelJet {
        value: a.value - b.value,
        d_t: a.d_t - b.d_t,
        d_x: a.d_x - b.d_x,
        d_x1: a.d_x1 - b.d_x1,
        d_u: a.d_u - b.d_u,
    }
}

/// `f + b(t,t) p + sigma(t,t) q + sum_e theta(t,t,e) r_e nu_e + g(t,t) lambda`.
#[allow(clippy::too_many_arguments)]
pub fn eval_h0(m: &dyn Model, marks: &MarkSpace, t: f64, a: &HArgs, lambda: f64, p: f64, q: f64, r: &[f64]) -> (f64, Partials) {
    let nm = marks.len();
    let kp = KernelPoint {
        t,
        s: t,
        x: a.x,
        x1: a.x1,
        u: a.u,
    };
    let f = m.running(t, a.x, a.x1, a.y, a.u);
    let b = m.drift(&kp);
    let s = m.diffusion(&kp);
    let mut dk = vec![0.0; nm];
    let g = m.generator(
        &GeneratorPoint {
            t,
            s: t,
            x: a.x,
            x1: a.x1,
            y: a.y,
            z: a.z,
            k: &a.k,
            u: a.u,
        },
        &mut dk,
    );
    let mut value = f.value + b.value * p + s.value * q;
    let mut d = Partials {
        x: f.d_x + b.d_x * p + s.d_x * q,
        x1: f.d_x1 + b.d_x1 * p + s.d_x1 * q,
        y: f.d_y,
        z: 0.0,
        u: f.d_u + b.d_u * p + s.d_u * q,
        k: vec![0.0; nm],
    };
    for (e, (&mark, &nu)) in marks.marks().iter().zip(marks.intensities()).enumerate() {
        let th = m.jump(&kp, mark);
        let w = r[e] * nu;
        value += th.value * w;
        d.x += th.d_x * w;
        d.x1 += th.d_x1 * w;
        d.u += th.d_u * w;
    }
    value += g.value * lambda;
    d.x += g.d_x * lambda;
    d.x1 += g.d_x1 * lambda;
    d.y += g.d_y * lambda;
    d.z += g.d_z * lambda;
    d.u += g.d_u * lambda;
    for (o, v) in d.k.iter_mut().zip(&dk) {
        *o = v * lambda;
    }
    (value, d)
}

/// Future adjoint values seen from step `i`: entry `j` belongs to step `i + j`.
/// `q` and `r` may be shorter than `p` (missing cells count as zero).
pub struct ForwardRow<'a> {
    pub p: &'a [f64],
    pub q: &'a [f64],
    pub r: &'a [Vec<f64>],
}

/// Forward-kernel memory terms `sum_{m >= i} [k(t_{m+1}, t_i) - k(t_m, t_i)] adj_m`.
/// Adds partials to `out` and the anticipating `u`-part (the `p` terms with
/// `m > i`) to `antic_u`.
#[allow(clippy::too_many_arguments)]
fn forward_terms(m: &dyn Model, grid: &TimeGrid, marks: &MarkSpace, i: usize, a: &HArgs, row: &ForwardRow<'_>, out: &mut Partials, antic_u: &mut f64) -> [f64; 3] {
    let mut terms = [0.0; 3];
    let n = grid.n_steps();
    let s = grid.time(i as isize);
    let at = |t: f64| KernelPoint {
        t,
        s,
        x: a.x,
        x1: a.x1,
        u: a.u,
    };
    for mm in i..n {
        let j = mm - i;
        let (k0, k1) = (at(grid.time(mm as isize)), at(grid.time(mm as isize + 1)));
        let pm = row.p.get(j).copied().unwrap_or(0.0);
        let db = kernel_diff(m.drift(&k1), m.drift(&k0));
        terms[0] += db.value * pm;
        out.x += db.d_x * pm;
        out.x1 += db.d_x1 * pm;
        out.u += db.d_u * pm;
        if j > 0 {
            *antic_u += db.d_u * pm;
        }
        let qm = row.q.get(j).copied().unwrap_or(0.0);
        if qm != 0.0 {
            let ds = kernel_diff(m.diffusion(&k1), m.diffusion(&k0));
            terms[1] += ds.value * qm;
            out.x += ds.d_x * qm;
            out.x1 += ds.d_x1 * qm;
            out.u += ds.d_u * qm;
        }
        if let Some(rm) = row.r.get(j) {
            for (e, (&mark, &nu)) in marks.marks().iter().zip(marks.intensities()).enumerate() {
                let w = rm[e] * nu;
                if w != 0.0 {
                    let dt_ = kernel_diff(m.jump(&k1, mark), m.jump(&k0, mark));
                    terms[2] += dt_.value * w;
                    out.x += dt_.d_x * w;
                    out.x1 += dt_.d_x1 * w;
                    out.u += dt_.d_u * w;
                }
            }
        }
    }
    terms
}

/// Past values seen from step `i`: `lambda_bar[m]` for `m < i`, and the
/// backward fields `Z(m, i)`, `K(m, i, .)` for `m <= i`.
pub struct MemoryRow<'a> {
    pub lambda_bar: &'a [f64],
    pub z: &'a [f64],
    pub k: &'a [Vec<f64>],
}

/// Generator memory terms `-sum_{m < i} [G(m+1) - G(m)] lambda_bar_m`, split into
/// the first-argument, `Z`-row and `K`-row differences. The `z`, `k`
/// arguments shift the whole row by their offset from the diagonal, so
/// partials in `z`, `k` are derivatives along that shift.
fn memory_terms(m: &dyn Model, grid: &TimeGrid, i: usize, a: &HArgs, row: &MemoryRow<'_>, out: &mut Partials) -> [f64; 3] {
    let nm = a.k.len();
    let s = grid.time(i as isize);
    let dz = a.z - row.z[i];
    let dkv: Vec<f64> = (0..nm).map(|e| a.k[e] - row.k[i][e]).collect();
    let shifted = |mm: usize| -> (f64, Vec<f64>) { (row.z[mm] + dz, (0..nm).map(|e| row.k[mm][e] + dkv[e]).collect()) };
    let mut terms = [0.0; 3];
    let mut d0 = vec![0.0; nm];
    let mut d1 = vec![0.0; nm];
    let mut scratch = vec![0.0; nm];
    let jet = |t: f64, z: f64, k: &[f64], dk: &mut [f64]| -> GeneratorJet {
        m.generator(
            &GeneratorPoint {
                t,
                s,
                x: a.x,
                x1: a.x1,
                y: a.y,
                z,
                k,
                u: a.u,
            },
            dk,
        )
    };
    for mm in 0..i {
        let lb = row.lambda_bar[mm];
        let (t0, t1) = (grid.time(mm as isize), grid.time(mm as isize + 1));
        let (z0, k0) = shifted(mm);
        let (z1, k1) = shifted(mm + 1);
        let ja = jet(t0, z0, &k0, &mut d0);
        let jb = jet(t1, z0, &k0, &mut scratch).value;
        let jc = jet(t1, z1, &k0, &mut scratch).value;
        let jd = jet(t1, z1, &k1, &mut d1);
        terms[0] -= (jb - ja.value) * lb;
        terms[1] -= (jc - jb) * lb;
        terms[2] -= (jd.value - jc) * lb;
        out.x -= (jd.d_x - ja.d_x) * lb;
        out.x1 -= (jd.d_x1 - ja.d_x1) * lb;
        out.y -= (jd.d_y - ja.d_y) * lb;
        out.z -= (jd.d_z - ja.d_z) * lb;
        out.u -= (jd.d_u - ja.d_u) * lb;
        for e in 0..nm {
            out.k[e] -= (d1[e] - d0[e]) * lb;
        }
    }
    terms
}

/// Inputs shared by the adjoint solvers.
pub struct AdjointProblem<'a> {
    pub model: &'a dyn Model,
    pub grid: &'a TimeGrid,
    pub drivers: &'a DriverPaths,
    pub state: &'a ForwardEnsemble,
    pub control: &'a ControlPolicy,
    pub backward: &'a BackwardSolution,
}

impl<'a> AdjointProblem<'a> {
    fn check(&self) -> Result<()> {
        self.drivers.check_grid(self.grid)?;
        self.control.check_shape(self.grid, self.drivers.n_paths())?;
        let np = self.drivers.n_paths();
        if self.state.n_paths() != np || self.backward.y.n_paths() != np || self.backward.regressor.n_paths() != np {
            return Err(Error::validation("adjoint inputs differ in path count"));
        }
        if self.backward.z.n_steps() != self.grid.n_steps() {
            return Err(Error::validation("backward fields do not match the grid"));
        }
        Ok(())
    }

    fn reg(&self) -> &Regressor {
        &self.backward.regressor
    }

    fn n_marks(&self) -> usize {
        self.drivers.n_marks()
    }

    fn features(&self, p: usize, i: usize, buf: &mut [f64; MAX_BASIS]) -> usize {
        let nb = self.reg().len(i);
        self.reg().path_features(i, self.state.states(), p, &mut buf[..nb]);
        nb
    }

    /// Arguments at `(path, i)`: state, `Y`, the diagonal of `Z`, `K`, and `u`.
    pub fn args(&self, p: usize, i: usize) -> HArgs {
        let mut f = [0.0; MAX_BASIS];
        let nb = self.features(p, i, &mut f);
        let f = &f[..nb];
        HArgs {
            x: self.state.x(p, i),
            x1: self.state.x1(p, i),
            y: self.backward.y.get(p, i as isize),
            z: self.backward.z.value(i, i, 0, f).unwrap_or(0.0),
            k: (0..self.n_marks()).map(|e| self.backward.k.value(i, i, e, f).unwrap_or(0.0)).collect(),
            u: self.control.get(p, i),
        }
    }

    /// `Z(m, i)` and `K(m, i, .)` for `m <= i` on one path.
    fn field_column(&self, p: usize, i: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut f = [0.0; MAX_BASIS];
        let nb = self.features(p, i, &mut f);
        let f = &f[..nb];
        let z = (0..=i).map(|mm| self.backward.z.value(mm, i, 0, f).unwrap_or(0.0)).collect();
        let k = (0..=i)
            .map(|mm| (0..self.n_marks()).map(|e| self.backward.k.value(mm, i, e, f).unwrap_or(0.0)).collect())
            .collect();
        (z, k)
    }

    /// Generator memory terms can be nonzero.
    fn memory_active(&self) -> bool {
        let s = self.model.structure();
        s.has_generator && (s.volterra_generator || self.backward.z.layout() != crate::field::Layout::RowInvariant)
    }
}

/// Forward adjoint and its implicit drift values.
#[derive(Debug, Clone)]
pub struct LambdaSolution {
    /// Steps `0..=n`.
    pub lambda: PathMatrix,
    /// `lambda_i + H_y(i) dt`, steps `0..n`.
    pub lambda_bar: PathMatrix,
    /// Jump sensitivities dropped on zero-intensity marks.
    pub dropped_marks: usize,
}

/// `lambda_{i+1} = lambda_i + H_y dt + H_z dB_i + sum_e (dH/dk_e / nu_e) dN_i(e)`
/// from `lambda_0 = h'(Y_0)`; `H` is evaluated at `lambda_bar_i`.
pub fn solve_lambda(pb: &AdjointProblem<'_>) -> Result<LambdaSolution> {
    pb.check()?;
    let n = pb.grid.n_steps();
    let dt = pb.grid.dt();
    let np = pb.drivers.n_paths();
    let nm = pb.n_marks();
    let nu = pb.drivers.marks().intensities().to_vec();
    let memory = pb.memory_active();
    let mut lambda = PathMatrix::zeros(np, 0, n as isize);
    let mut lambda_bar = PathMatrix::zeros(np, 0, n as isize);
    let results: Vec<Result<usize>> = lambda
        .rows_mut()
        .zip(lambda_bar.rows_mut())
        .enumerate()
        .par_bridge()
        .map(|(p, (lam, lbar))| {
            let mut dropped = 0;
            lam[0] = pb.model.terminal(pb.backward.y.get(p, 0)).1;
            let mut dk = vec![0.0; nm];
            for i in 0..n {
                let a = pb.args(p, i);
                let t = pb.grid.time(i as isize);
                let g = pb.model.generator(
                    &GeneratorPoint {
                        t,
                        s: t,
                        x: a.x,
                        x1: a.x1,
                        y: a.y,
                        z: a.z,
                        k: &a.k,
                        u: a.u,
                    },
                    &mut dk,
                );
                let f = pb.model.running(t, a.x, a.x1, a.y, a.u);
                let mut mem = Partials::zeros(nm);
                if memory {
                    let (zc, kc) = pb.field_column(p, i);
                    memory_terms(
                        pb.model,
                        pb.grid,
                        i,
                        &a,
                        &MemoryRow {
                            lambda_bar: &lbar[..i],
                            z: &zc,
                            k: &kc,
                        },
                        &mut mem,
                    );
                }
                let lb = (lam[i] + (f.d_y + mem.y) * dt) / (1.0 - g.d_y * dt);
                lbar[i] = lb;
                let h_z = g.d_z * lb + mem.z;
                let mut next = lb + h_z * pb.drivers.db(p, i);
                for e in 0..nm {
                    let h_k = dk[e] * lb + mem.k[e];
                    if nu[e] > 0.0 {
                        next += h_k / nu[e] * pb.drivers.dn(p, i, e);
                    } else if h_k != 0.0 {
                        dropped += 1;
                    }
                }
                if !next.is_finite() {
                    return Err(Error::NonFinite {
                        what: "lambda",
                        path: p,
                        step: i as isize + 1,
                    });
                }
                lam[i + 1] = next;
            }
            Ok(dropped)
        })
        .collect();
    let mut dropped_marks = 0;
    for r in results {
        dropped_marks += r?;
    }
    if dropped_marks > 0 {
        log::warn!("k-sensitivity on zero-intensity marks dropped {dropped_marks} times");
    }
    Ok(LambdaSolution {
        lambda,
        lambda_bar,
        dropped_marks,
    })
}

/// Backward adjoint `(p, q, r)` and the control gradient.
#[derive(Debug, Clone)]
pub struct PSolution {
    /// Steps `0..=n`, zero at `n`.
    pub p: PathMatrix,
    /// `q(t, s)` conditioned at `t`; diagonal only unless the noise kernels are Volterra.
    pub q: TriangularField,
    pub r: TriangularField,
    /// Adapted `dH/du` per path and step (`0..n`).
    pub h_u: PathMatrix,
}

struct StepOut {
    p: f64,
    q_next: f64,
    hx1: f64,
    adapted_u: f64,
    antic_u: f64,
}

/// Backward recursion `p_k = E_k[Q_{k+1}]`, `Q_k = p_k + (H_x(k) + H_x1(k + d)) dt`,
/// `Q_n = 0`; `q_k = E_k[(Q_{k+1} - p_k) dB_k] / dt`, `r_k(e)` likewise with
/// `dN_k(e) / nu_e`.
pub fn solve_p_adjoint(pb: &AdjointProblem<'_>, lam: &LambdaSolution) -> Result<PSolution> {
    pb.check()?;
    let n = pb.grid.n_steps();
    let d = pb.grid.delay_steps();
    let dt = pb.grid.dt();
    let np = pb.drivers.n_paths();
    let nm = pb.n_marks();
    let comps = nm.max(1);
    let marks = pb.drivers.marks();
    let nu = marks.intensities().to_vec();
    let reg = pb.backward.regressor.clone();
    let x = pb.state.states();
    let st = pb.model.structure();
    let forward = st.volterra_kernels;
    let noise = st.volterra_noise;
    let memory = pb.memory_active();
    let (mut q, mut r) = if noise {
        (
            TriangularField::zeros_cells(reg.clone(), n, 1, Conditioning::Row),
            TriangularField::zeros_cells(reg.clone(), n, comps, Conditioning::Row),
        )
    } else {
        (
            TriangularField::zeros_diagonal(reg.clone(), n, 1, Conditioning::Row),
            TriangularField::zeros_diagonal(reg.clone(), n, comps, Conditioning::Row),
        )
    };
    let mut p_mat = PathMatrix::zeros(np, 0, n as isize);
    let mut h_u = PathMatrix::zeros(np, 0, n as isize);
    let mut q_next = vec![0.0; np];
    let mut ring = vec![vec![0.0; np]; d + 1];
    let mut all_zero = true;
    for k in (0..n).rev() {
        let nb = reg.len(k);
        let (cp, cq, cr) = if all_zero {
            (vec![0.0; nb], vec![0.0; nb], vec![vec![0.0; nb]; nm])
        } else {
            let cp = reg.project(k, x, &q_next);
            let fits = reg.project_many(k, x, 1 + nm, |p, o| {
                let mut f = [0.0; MAX_BASIS];
                let f = &mut f[..nb];
                reg.path_features(k, x, p, f);
                let v = q_next[p] - Regressor::eval(&cp, f);
                o[0] = v * pb.drivers.db(p, k);
                for e in 0..nm {
                    o[1 + e] = v * pb.drivers.dn(p, k, e);
                }
            });
            let cq: Vec<f64> = fits[0].iter().map(|v| v / dt).collect();
            let cr: Vec<Vec<f64>> = (0..nm)
                .map(|e| if nu[e] > 0.0 { fits[1 + e].iter().map(|v| v / (nu[e] * dt)).collect() } else { vec![0.0; nb] })
                .collect();
            (cp, cq, cr)
        };
        q.set_coeffs(k, k, 0, &cq);
        for (e, c) in cr.iter().enumerate() {
            r.set_coeffs(k, k, e, c);
        }
        if noise {
            for mm in k + 1..n {
                let fits = reg.project_many(k, x, 1 + nm, |p, o| {
                    let pm = p_mat.get(p, mm as isize);
                    o[0] = pm * pb.drivers.db(p, k);
                    for e in 0..nm {
                        o[1 + e] = pm * pb.drivers.dn(p, k, e);
                    }
                });
                q.set_coeffs(k, mm, 0, &fits[0].iter().map(|v| v / dt).collect::<Vec<_>>());
                for e in 0..nm {
                    let c: Vec<f64> = if nu[e] > 0.0 { fits[1 + e].iter().map(|v| v / (nu[e] * dt)).collect() } else { vec![0.0; nb] };
                    r.set_coeffs(k, mm, e, &c);
                }
            }
        }
        let ring_read = if k + d < n { Some((k + d) % (d + 1)) } else { None };
        let outs: Vec<Result<StepOut>> = (0..np)
            .into_par_iter()
            .map(|p| {
                let mut fb = [0.0; MAX_BASIS];
                let f = &mut fb[..nb];
                reg.path_features(k, x, p, f);
                let pk = Regressor::eval(&cp, f);
                let qk = Regressor::eval(&cq, f);
                let rk: Vec<f64> = (0..nm).map(|e| Regressor::eval(&cr[e], f)).collect();
                let a = pb.args(p, k);
                let (_, mut part) = eval_h0(pb.model, marks, pb.grid.time(k as isize), &a, lam.lambda_bar.get(p, k as isize), pk, qk, &rk);
                let mut antic_u = 0.0;
                if forward {
                    let mut prow = Vec::with_capacity(n - k);
                    prow.push(pk);
                    prow.extend((k + 1..n).map(|mm| p_mat.get(p, mm as isize)));
                    let (qrow, rrow): (Vec<f64>, Vec<Vec<f64>>) = if noise {
                        (
                            (k..n).map(|mm| if mm == k { qk } else { q.value(k, mm, 0, f).unwrap_or(0.0) }).collect(),
                            (k..n)
                                .map(|mm| if mm == k { rk.clone() } else { (0..nm).map(|e| r.value(k, mm, e, f).unwrap_or(0.0)).collect() })
                                .collect(),
                        )
                    } else {
                        (vec![qk], vec![rk.clone()])
                    };
                    let mut fp = Partials::zeros(nm);
                    forward_terms(pb.model, pb.grid, marks, k, &a, &ForwardRow { p: &prow, q: &qrow, r: &rrow }, &mut fp, &mut antic_u);
                    part.add(&fp);
                }
                if memory {
                    let (zc, kc) = pb.field_column(p, k);
                    let lrow: Vec<f64> = (0..k).map(|mm| lam.lambda_bar.get(p, mm as isize)).collect();
                    let mut mp = Partials::zeros(nm);
                    memory_terms(pb.model, pb.grid, k, &a, &MemoryRow { lambda_bar: &lrow, z: &zc, k: &kc }, &mut mp);
                    part.add(&mp);
                }
                let hx1_here = part.x1;
                let hx1_ahead = match ring_read {
                    Some(_) if d == 0 => hx1_here,
                    Some(slot) => ring[slot][p],
                    None => 0.0,
                };
                let qn = pk + (part.x + hx1_ahead) * dt;
                if !qn.is_finite() {
                    return Err(Error::NonFinite {
                        what: "p adjoint",
                        path: p,
                        step: k as isize,
                    });
                }
                Ok(StepOut {
                    p: pk,
                    q_next: qn,
                    hx1: hx1_here,
                    adapted_u: part.u - antic_u,
                    antic_u,
                })
            })
            .collect();
        let outs: Vec<StepOut> = outs.into_iter().collect::<Result<_>>()?;
        let antic_fit = if forward && outs.iter().any(|o| o.antic_u != 0.0) {
            let v: Vec<f64> = outs.iter().map(|o| o.antic_u).collect();
            Some(reg.project(k, x, &v))
        } else {
            None
        };
        let slot = k % (d + 1);
        for (p, o) in outs.iter().enumerate() {
            p_mat.set(p, k as isize, o.p);
            let mut hu = o.adapted_u;
            if let Some(c) = &antic_fit {
                let mut fb = [0.0; MAX_BASIS];
                let f = &mut fb[..nb];
                reg.path_features(k, x, p, f);
                hu += Regressor::eval(c, f);
            }
            h_u.set(p, k as isize, hu);
            q_next[p] = o.q_next;
            ring[slot][p] = o.hx1;
        }
        all_zero = all_zero && q_next.iter().all(|v| *v == 0.0);
    }
    Ok(PSolution { p: p_mat, q, r, h_u })
}

/// Full adjoint system with the alternation record.
#[derive(Debug, Clone)]
pub struct AdjointSolution {
    pub lambda: LambdaSolution,
    pub pqr: PSolution,
    pub sweeps: usize,
    /// Weighted distance between successive `lambda` iterates.
    pub sweep_distances: Vec<f64>,
}

/// Alternates `lambda` and `(p, q, r)` from zero. `lambda` does not read
/// `(p, q, r)`, so the second sweep reproduces the first exactly and the
/// alternation closes after two sweeps.
pub fn solve_adjoint(pb: &AdjointProblem<'_>) -> Result<AdjointSolution> {
    let lambda = solve_lambda(pb)?;
    let d1 = crate::drivers::process_norm_sq(&lambda.lambda, pb.grid).sqrt();
    let pqr = solve_p_adjoint(pb, &lambda)?;
    Ok(AdjointSolution {
        lambda,
        pqr,
        sweeps: 2,
        sweep_distances: vec![d1, 0.0],
    })
}

/// Evaluates `H` with analytic partials at `(path, i)`, optionally at
/// arguments other than the solved ones. All memory terms are computed.
pub fn evaluate_hamiltonian(pb: &AdjointProblem<'_>, adj: &AdjointSolution, path: usize, i: usize, args: Option<&HArgs>) -> Result<HamiltonianEval> {
    pb.check()?;
    let n = pb.grid.n_steps();
    if i >= n {
        return Err(Error::validation(format!("step {i} outside 0..n_steps")));
    }
    let nm = pb.n_marks();
    let marks = pb.drivers.marks();
    let own = pb.args(path, i);
    let a = args.unwrap_or(&own);
    let mut fb = [0.0; MAX_BASIS];
    let nb = pb.features(path, i, &mut fb);
    let f = &fb[..nb];
    let pq = &adj.pqr;
    let pi = pq.p.get(path, i as isize);
    let qi = pq.q.value(i, i, 0, f).unwrap_or(0.0);
    let ri: Vec<f64> = (0..nm).map(|e| pq.r.value(i, i, e, f).unwrap_or(0.0)).collect();
    let lb = adj.lambda.lambda_bar.get(path, i as isize);
    let (h0, mut partials) = eval_h0(pb.model, marks, pb.grid.time(i as isize), a, lb, pi, qi, &ri);
    let prow: Vec<f64> = (i..n).map(|mm| pq.p.get(path, mm as isize)).collect();
    let qrow: Vec<f64> = (i..n).map(|mm| if pq.q.is_materialized(i, mm) { pq.q.value(i, mm, 0, f).unwrap() } else { 0.0 }).collect();
    let rrow: Vec<Vec<f64>> = (i..n)
        .map(|mm| (0..nm).map(|e| if pq.r.is_materialized(i, mm) { pq.r.value(i, mm, e, f).unwrap() } else { 0.0 }).collect())
        .collect();
    let mut antic = 0.0;
    let fwd = forward_terms(pb.model, pb.grid, marks, i, a, &ForwardRow { p: &prow, q: &qrow, r: &rrow }, &mut partials, &mut antic);
    let (zc, kc) = pb.field_column(path, i);
    let lrow: Vec<f64> = (0..i).map(|mm| adj.lambda.lambda_bar.get(path, mm as isize)).collect();
    let mem = memory_terms(pb.model, pb.grid, i, a, &MemoryRow { lambda_bar: &lrow, z: &zc, k: &kc }, &mut partials);
    let h1 = [fwd[0], fwd[1], fwd[2], mem[0], mem[1], mem[2]];
    let h = h0 + h1.iter().sum::<f64>();
    Ok(HamiltonianEval { h0, h1, h, partials })
}

/// Per-step summary: mean `lambda`, mean `p`, RMS of `q(t, t)` and of `r(t, t, .)`.
pub fn adjoint_summary(pb: &AdjointProblem<'_>, adj: &AdjointSolution) -> Vec<[f64; 4]> {
    let n = pb.grid.n_steps();
    let np = pb.drivers.n_paths();
    let nm = pb.n_marks();
    let reg = pb.reg();
    (0..n)
        .map(|i| {
            let nb = reg.len(i);
            let lam = crate::par::mean_and_se(&adj.lambda.lambda.column(i as isize)).0;
            let p = crate::par::mean_and_se(&adj.pqr.p.column(i as isize)).0;
            let qc = adj.pqr.q.coeffs(i, i, 0).map(|c| reg.mean_square(i, c)).unwrap_or(0.0);
            let rc: f64 = (0..nm).map(|e| adj.pqr.r.coeffs(i, i, e).map(|c| reg.mean_square(i, c)).unwrap_or(0.0)).sum();
            let _ = (np, nb);
            [lam, p, qc.sqrt(), rc.sqrt()]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsvie::{picard_solve, SolverSettings};
    use crate::drivers::{build_grid, sample_drivers};
    use crate::forward::simulate_forward;
    use crate::models::{builtin, ControlSet, InfoStructure, Params, RunningJet, Structure};
    use std::sync::Arc;

    struct Setup {
        m: Arc<dyn Model>,
        grid: TimeGrid,
        dr: DriverPaths,
        x: ForwardEnsemble,
        u: ControlPolicy,
        bw: BackwardSolution,
    }

    impl Setup {
        fn new(m: Arc<dyn Model>, grid: TimeGrid, marks: MarkSpace, paths: usize, u: f64) -> Self {
            let dr = sample_drivers(&grid, &marks, paths, 11).unwrap();
            let u = ControlPolicy::constant(paths, &grid, u, InfoStructure::Full, &m.controls()).unwrap();
            let x = simulate_forward(m.as_ref(), &grid, &dr, &u).unwrap();
            let bw = picard_solve(m.as_ref(), &grid, &dr, &x, &u, &SolverSettings::default()).unwrap();
            Self { m, grid, dr, x, u, bw }
        }

        fn problem(&self) -> AdjointProblem<'_> {
            AdjointProblem {
                model: self.m.as_ref(),
                grid: &self.grid,
                drivers: &self.dr,
                state: &self.x,
                control: &self.u,
                backward: &self.bw,
            }
        }
    }

    #[test]
    fn h0_direct_substitution() {
        let marks = MarkSpace::new(vec![1.0], vec![0.5]).unwrap();
        let m = builtin("zero", &Params::new()).unwrap();
        let a = HArgs {
            x: 0.3,
            x1: 0.1,
            y: 0.2,
            z: 0.0,
            k: vec![0.0],
            u: 0.0,
        };
        assert_eq!(eval_h0(m.as_ref(), &marks, 0.0, &a, 1.0, 1.0, 1.0, &[1.0]).0, 0.0);

        #[derive(Debug)]
        struct Consts;
        impl Model for Consts {
            fn name(&self) -> &str {
                "consts"
            }
            fn initial(&self, _t: f64) -> (f64, f64) {
                (0.0, 0.0)
            }
            fn drift(&self, _p: &KernelPoint) -> KernelJet {
                KernelJet { value: 2.0, ..Default::default() }
            }
            fn diffusion(&self, _p: &KernelPoint) -> KernelJet {
                KernelJet::default()
            }
            fn jump(&self, _p: &KernelPoint, _e: f64) -> KernelJet {
                KernelJet { value: 1.0, ..Default::default() }
            }
            fn generator(&self, _p: &GeneratorPoint<'_>, d: &mut [f64]) -> GeneratorJet {
                d.fill(0.0);
                GeneratorJet::default()
            }
            fn running(&self, _: f64, _: f64, _: f64, _: f64, _: f64) -> RunningJet {
                RunningJet { value: 1.0, ..Default::default() }
            }
            fn terminal(&self, _y: f64) -> (f64, f64) {
                (0.0, 0.0)
            }
            fn lipschitz(&self) -> f64 {
                0.0
            }
            fn controls(&self) -> ControlSet {
                ControlSet { lo: 0.0, hi: 0.0 }
            }
            fn structure(&self) -> Structure {
                Structure::default()
            }
        }
        // f = 1, b = 2, p = 3 -> 7; theta = 1, r = 2, nu = 0.5 adds 1.
        assert_eq!(eval_h0(&Consts, &MarkSpace::empty(), 0.0, &HArgs { k: vec![], ..a.clone() }, 0.0, 3.0, 0.0, &[]).0, 7.0);
        assert_eq!(eval_h0(&Consts, &marks, 0.0, &a, 0.0, 0.0, 0.0, &[2.0]).0, 1.0 + 1.0);
    }

    #[test]
    fn forward_h1_telescopes_to_kernel_difference() {
        #[derive(Debug)]
        struct Decay;
        impl Model for Decay {
            fn name(&self) -> &str {
                "decay"
            }
            fn initial(&self, _t: f64) -> (f64, f64) {
                (0.0, 0.0)
            }
            fn drift(&self, p: &KernelPoint) -> KernelJet {
                KernelJet {
                    value: -(-p.t).exp(),
                    d_t: (-p.t).exp(),
                    ..Default::default()
                }
            }
            fn diffusion(&self, _p: &KernelPoint) -> KernelJet {
                KernelJet::default()
            }
            fn jump(&self, _p: &KernelPoint, _e: f64) -> KernelJet {
                KernelJet::default()
            }
            fn generator(&self, _p: &GeneratorPoint<'_>, d: &mut [f64]) -> GeneratorJet {
                d.fill(0.0);
                GeneratorJet::default()
            }
            fn running(&self, _: f64, _: f64, _: f64, _: f64, _: f64) -> RunningJet {
                RunningJet::default()
            }
            fn terminal(&self, _y: f64) -> (f64, f64) {
                (0.0, 0.0)
            }
            fn lipschitz(&self) -> f64 {
                0.0
            }
            fn controls(&self) -> ControlSet {
                ControlSet { lo: 0.0, hi: 0.0 }
            }
            fn structure(&self) -> Structure {
                Structure {
                    volterra_kernels: true,
                    ..Default::default()
                }
            }
        }
        let grid = build_grid(10.0, 1000, 0, 1.0).unwrap();
        let a = HArgs {
            x: 0.0,
            x1: 0.0,
            y: 0.0,
            z: 0.0,
            k: vec![],
            u: 0.0,
        };
        let ones = vec![1.0; 900];
        let mut part = Partials::zeros(0);
        let mut antic = 0.0;
        let t = forward_terms(&Decay, &grid, &MarkSpace::empty(), 100, &a, &ForwardRow { p: &ones, q: &[], r: &[] }, &mut part, &mut antic);
        let exact = (-1.0f64).exp() - (-10.0f64).exp();
        assert!((t[0] - exact).abs() < 1e-12);
        let mut lam = Partials::zeros(0);
        let mem = memory_terms(&Decay, &grid, 0, &a, &MemoryRow { lambda_bar: &[], z: &[0.0], k: &[vec![]] }, &mut lam);
        assert_eq!(mem, [0.0; 3]);
    }

    #[test]
    fn markov_models_have_zero_h1_and_lq_costate() {
        let grid = build_grid(4.0, 80, 5, 1.0).unwrap();
        let s = Setup::new(builtin("sdde", &Params::new()).unwrap(), grid, MarkSpace::empty(), 400, 0.1);
        let pb = s.problem();
        let adj = solve_adjoint(&pb).unwrap();
        for p in [0usize, 17, 399] {
            for i in [0usize, 3, 40, 79] {
                let h = evaluate_hamiltonian(&pb, &adj, p, i, None).unwrap();
                assert_eq!(h.h1, [0.0; 6]);
                assert_eq!(h.h, h.h0 + h.h1.iter().sum::<f64>());
            }
        }
        for p in 0..400 {
            assert_eq!(adj.lambda.lambda.get(p, 0), 1.0);
        }
    }

    #[test]
    fn lambda_follows_exponential_decay() {
        let grid = build_grid(5.0, 500, 0, 12.0).unwrap();
        let s = Setup::new(builtin("exp_generator", &Params::from([("c".into(), 0.7)])).unwrap(), grid, MarkSpace::empty(), 8, 0.0);
        let lam = solve_lambda(&s.problem()).unwrap();
        for i in (0..=500).step_by(50) {
            let exact = (-0.7 * grid.time(i)).exp();
            assert!((lam.lambda.get(0, i) - exact).abs() < 0.7 * grid.dt(), "step {i}");
        }
    }

    #[test]
    fn hamiltonian_partials_match_finite_differences() {
        let marks = MarkSpace::new(vec![0.5], vec![1.0]).unwrap();
        let grid = build_grid(2.0, 20, 2, 1.0).unwrap();
        let cases = [
            builtin("jump_linear", &Params::new()).unwrap(),
            builtin("sdde", &Params::new()).unwrap(),
            builtin("det_volterra", &Params::from([("control_gain".into(), 1.0), ("cost_weight".into(), 1.0)])).unwrap(),
        ];
        for m in cases {
            let s = Setup::new(m, grid, marks.clone(), 64, 0.2);
            let pb = s.problem();
            let adj = solve_adjoint(&pb).unwrap();
            for (p, i) in [(0usize, 0usize), (5, 7), (63, 19)] {
                let base = pb.args(p, i);
                let ev = evaluate_hamiltonian(&pb, &adj, p, i, None).unwrap();
                let h = 1e-5;
                let fd = |mutate: &dyn Fn(&mut HArgs, f64)| {
                    let mut up = base.clone();
                    mutate(&mut up, h);
                    let mut dn = base.clone();
                    mutate(&mut dn, -h);
                    (evaluate_hamiltonian(&pb, &adj, p, i, Some(&up)).unwrap().h - evaluate_hamiltonian(&pb, &adj, p, i, Some(&dn)).unwrap().h) / (2.0 * h)
                };
                let checks = [
                    (ev.partials.x, fd(&|a, e| a.x += e)),
                    (ev.partials.x1, fd(&|a, e| a.x1 += e)),
                    (ev.partials.y, fd(&|a, e| a.y += e)),
                    (ev.partials.z, fd(&|a, e| a.z += e)),
                    (ev.partials.u, fd(&|a, e| a.u += e)),
                    (ev.partials.k[0], fd(&|a, e| a.k[0] += e)),
                ];
                for (j, (an, nu)) in checks.iter().enumerate() {
                    assert!((an - nu).abs() <= 1e-4 * an.abs().max(1.0), "{} arg {j}: {an} vs {nu}", s.m.name());
                }
            }
        }
    }

    #[test]
    fn deterministic_costate_is_tail_integral() {
        #[derive(Debug)]
        struct Tilted;
        impl Model for Tilted {
            fn name(&self) -> &str {
                "tilted"
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
            fn generator(&self, _p: &GeneratorPoint<'_>, d: &mut [f64]) -> GeneratorJet {
                d.fill(0.0);
                GeneratorJet::default()
            }
            fn running(&self, t: f64, x: f64, _: f64, _: f64, _: f64) -> RunningJet {
                RunningJet {
                    value: (-t).exp() * x,
                    d_x: (-t).exp(),
                    ..Default::default()
                }
            }
            fn terminal(&self, _y: f64) -> (f64, f64) {
                (0.0, 0.0)
            }
            fn lipschitz(&self) -> f64 {
                0.0
            }
            fn controls(&self) -> ControlSet {
                ControlSet { lo: 0.0, hi: 0.0 }
            }
            fn structure(&self) -> Structure {
                Structure::default()
            }
        }
        let grid = build_grid(8.0, 400, 0, 1.0).unwrap();
        let s = Setup::new(Arc::new(Tilted), grid, MarkSpace::empty(), 4, 0.0);
        let adj = solve_adjoint(&s.problem()).unwrap();
        for i in (0..400).step_by(40) {
            let exact = (-grid.time(i)).exp() - (-8.0f64).exp();
            assert!((adj.pqr.p.get(0, i) - exact).abs() < 2.0 * grid.dt(), "step {i}");
        }
    }
}
