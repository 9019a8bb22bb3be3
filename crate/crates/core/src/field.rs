//! Two-parameter fields on the triangle `{t <= s}` stored in regression form.
//!
//! Each cell holds fitted coefficients for one or more components (one per
//! mark for jump fields). A cell's value on a path is the fitted polynomial
//! evaluated at the path's state at the conditioning step: `s` for fields
//! such as `Z(t, s)`, `t` for fields indexed by the earlier time.

use crate::drivers::{MarkSpace, TimeGrid};
use crate::error::{Error, Result};
use crate::regression::Regressor;
use std::sync::Arc;

/// Which index of a cell selects the regression basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    Column,
    Row,
}

/// Storage pattern of the triangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Every cell `(t, s)` with `t <= s` stored.
    Cells,
    /// One entry per column; all rows share it.
    RowInvariant,
    /// Only the diagonal `(t, t)` is materialized.
    Diagonal,
}

#[derive(Debug, Clone)]
pub struct TriangularField {
    n: usize,
    comps: usize,
    stride: usize,
    cond: Conditioning,
    layout: Layout,
    coeffs: Vec<f64>,
    basis: Arc<Regressor>,
}

/// Bytes needed to store a full triangle.
pub fn cell_bytes(n: usize, comps: usize, stride: usize) -> usize {
    n * (n + 1) / 2 * comps * stride * std::mem::size_of::<f64>()
}

impl TriangularField {
    fn with_layout(basis: Arc<Regressor>, n: usize, comps: usize, cond: Conditioning, layout: Layout) -> Self {
        let stride = basis.max_len();
        let entries = match layout {
            Layout::Cells => n * (n + 1) / 2,
            Layout::RowInvariant | Layout::Diagonal => n,
        };
        Self {
            n,
            comps,
            stride,
            cond,
            layout,
            coeffs: vec![0.0; entries * comps * stride],
            basis,
        }
    }

    pub fn zeros_cells(basis: Arc<Regressor>, n: usize, comps: usize, cond: Conditioning) -> Self {
        Self::with_layout(basis, n, comps, cond, Layout::Cells)
    }

    pub fn zeros_row_invariant(basis: Arc<Regressor>, n: usize, comps: usize) -> Self {
        Self::with_layout(basis, n, comps, Conditioning::Column, Layout::RowInvariant)
    }

    pub fn zeros_diagonal(basis: Arc<Regressor>, n: usize, comps: usize, cond: Conditioning) -> Self {
        Self::with_layout(basis, n, comps, cond, Layout::Diagonal)
    }

    pub fn n_steps(&self) -> usize {
        self.n
    }

    pub fn n_components(&self) -> usize {
        self.comps
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn conditioning(&self) -> Conditioning {
        self.cond
    }

    pub fn basis(&self) -> &Arc<Regressor> {
        &self.basis
    }

    /// Grid step whose basis the cell `(t, s)` uses.
    #[inline]
    pub fn cond_step(&self, t: usize, s: usize) -> usize {
        match self.cond {
            Conditioning::Column => s,
            Conditioning::Row => t,
        }
    }

    #[inline]
    fn entry(&self, t: usize, s: usize) -> Option<usize> {
        assert!(t <= s, "triangular field read below the diagonal: ({t}, {s})");
        assert!(s < self.n, "column {s} outside the grid");
        match self.layout {
            Layout::Cells => Some(t * self.n - t * t.saturating_sub(1) / 2 + (s - t)),
            Layout::RowInvariant => Some(s),
            Layout::Diagonal => (t == s).then_some(t),
        }
    }

    /// Whether cell `(t, s)` is stored.
    pub fn is_materialized(&self, t: usize, s: usize) -> bool {
        self.entry(t, s).is_some()
    }

    /// Coefficients of component `comp` at cell `(t, s)`.
    #[inline]
    pub fn coeffs(&self, t: usize, s: usize, comp: usize) -> Option<&[f64]> {
        let e = self.entry(t, s)?;
        let len = self.basis.len(self.cond_step(t, s));
        let o = (e * self.comps + comp) * self.stride;
        Some(&self.coeffs[o..o + len])
    }

    pub fn set_coeffs(&mut self, t: usize, s: usize, comp: usize, values: &[f64]) {
        let e = self
            .entry(t, s)
            .unwrap_or_else(|| panic!("cell ({t}, {s}) is not stored in a {:?} field", self.layout));
        assert!(values.len() <= self.stride);
        let o = (e * self.comps + comp) * self.stride;
        self.coeffs[o..o + values.len()].copy_from_slice(values);
        self.coeffs[o + values.len()..o + self.stride].fill(0.0);
    }

    /// Cell value given the features at the conditioning step.
    #[inline]
    pub fn value(&self, t: usize, s: usize, comp: usize, feats: &[f64]) -> Option<f64> {
        self.coeffs(t, s, comp).map(|c| Regressor::eval(c, feats))
    }

    /// Cell value given the raw state at the conditioning step.
    pub fn value_at(&self, t: usize, s: usize, comp: usize, x: f64, x1: f64) -> Option<f64> {
        let step = self.cond_step(t, s);
        let mut f = vec![0.0; self.basis.len(step)];
        self.basis.features(step, x, x1, &mut f);
        self.value(t, s, comp, &f)
    }

    fn same_frame(&self, other: &Self) -> Result<()> {
        if self.n != other.n || self.comps != other.comps || self.cond != other.cond {
            return Err(Error::validation("triangular fields differ in shape"));
        }
        if !Arc::ptr_eq(&self.basis, &other.basis) {
            return Err(Error::validation("triangular fields use different regression bases"));
        }
        Ok(())
    }

    /// Full-triangle copy.
    pub fn to_cells(&self) -> Result<Self> {
        match self.layout {
            Layout::Cells => Ok(self.clone()),
            Layout::Diagonal => Err(Error::validation("diagonal-only field cannot be expanded")),
            Layout::RowInvariant => {
                let mut out = Self::zeros_cells(self.basis.clone(), self.n, self.comps, self.cond);
                for t in 0..self.n {
                    for s in t..self.n {
                        for c in 0..self.comps {
                            out.set_coeffs(t, s, c, self.coeffs(t, s, c).unwrap());
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// `self - other`, cellwise.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_frame(other)?;
        if self.layout == other.layout {
            let mut out = self.clone();
            for (a, b) in out.coeffs.iter_mut().zip(&other.coeffs) {
                *a -= b;
            }
            return Ok(out);
        }
        self.to_cells()?.sub(&other.to_cells()?)
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.coeffs {
            *v *= c;
        }
        out
    }

    /// `E sum_{t <= s < n} e^{beta s} |F(t, s)|^2 dt^2`, with mark weights `nu`
    /// when `marks` is given.
    pub fn weighted_norm_sq(&self, grid: &TimeGrid, marks: Option<&MarkSpace>) -> Result<f64> {
        if self.n != grid.n_steps() {
            return Err(Error::validation("field does not match the grid"));
        }
        if self.layout == Layout::Diagonal {
            return Err(Error::validation("diagonal-only field has no triangle norm"));
        }
        let comp_weight = |c: usize| marks.map_or(1.0, |m| m.intensities().get(c).copied().unwrap_or(0.0));
        let dt2 = grid.dt() * grid.dt();
        let mut total = 0.0;
        for s in 0..self.n {
            let w = grid.weight(s) * dt2;
            match self.layout {
                Layout::RowInvariant => {
                    let mut col = 0.0;
                    for c in 0..self.comps {
                        col += comp_weight(c) * self.basis.mean_square(s, self.coeffs(0, s, c).unwrap());
                    }
                    total += w * (s + 1) as f64 * col;
                }
                _ => {
                    for t in 0..=s {
                        let step = self.cond_step(t, s);
                        for c in 0..self.comps {
                            total += w * comp_weight(c) * self.basis.mean_square(step, self.coeffs(t, s, c).unwrap());
                        }
                    }
                }
            }
        }
        Ok(total)
    }

    /// Largest absolute coefficient.
    pub fn max_abs_coeff(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}
