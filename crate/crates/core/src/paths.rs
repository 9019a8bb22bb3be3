//! Dense per-path storage over a range of grid steps.

use crate::error::{Error, Result};

/// Values `v[path][step]` for steps `first..=last`, stored path-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PathMatrix {
    n_paths: usize,
    first: isize,
    len: usize,
    data: Vec<f64>,
}

impl PathMatrix {
    pub fn zeros(n_paths: usize, first: isize, last: isize) -> Self {
        assert!(last >= first - 1, "empty step range must have last = first - 1");
        let len = (last - first + 1) as usize;
        Self {
            n_paths,
            first,
            len,
            data: vec![0.0; n_paths * len],
        }
    }

    pub fn filled(n_paths: usize, first: isize, last: isize, value: f64) -> Self {
        let mut m = Self::zeros(n_paths, first, last);
        m.data.fill(value);
        m
    }

    /// Builds a matrix from per-path rows of equal length.
    pub fn from_rows(first: isize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::validation("rows of unequal length"));
        }
        let n_paths = rows.len();
        Ok(Self {
            n_paths,
            first,
            len,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn first_step(&self) -> isize {
        self.first
    }

    pub fn last_step(&self) -> isize {
        self.first + self.len as isize - 1
    }

    pub fn n_steps(&self) -> usize {
        self.len
    }

    #[inline]
    fn offset(&self, path: usize, step: isize) -> usize {
        debug_assert!(path < self.n_paths);
        debug_assert!(step >= self.first && step <= self.last_step(), "step {step} out of range");
        path * self.len + (step - self.first) as usize
    }

    #[inline]
    pub fn get(&self, path: usize, step: isize) -> f64 {
        self.data[self.offset(path, step)]
    }

    #[inline]
    pub fn set(&mut self, path: usize, step: isize, value: f64) {
        let o = self.offset(path, step);
        self.data[o] = value;
    }

    pub fn row(&self, path: usize) -> &[f64] {
        &self.data[path * self.len..(path + 1) * self.len]
    }

    pub fn row_mut(&mut self, path: usize) -> &mut [f64] {
        &mut self.data[path * self.len..(path + 1) * self.len]
    }

    /// Mutable per-path rows, for path-parallel fills.
    pub fn rows_mut(&mut self) -> std::slice::ChunksMut<'_, f64> {
        self.data.chunks_mut(self.len.max(1))
    }

    /// Cross-section at `step`.
    pub fn column(&self, step: isize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.get(p, step)).collect()
    }

    pub fn set_column(&mut self, step: isize, values: &[f64]) {
        assert_eq!(values.len(), self.n_paths);
        for (p, v) in values.iter().enumerate() {
            self.set(p, step, *v);
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n_paths == other.n_paths && self.first == other.first && self.len == other.len
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|v| f(*v)).collect(),
            ..self.clone()
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Error::validation("path matrices differ in shape"));
        }
        Ok(Self {
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
            ..self.clone()
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}
