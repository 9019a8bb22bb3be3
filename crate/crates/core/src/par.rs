//! Deterministic parallel reductions.
//!
//! Cross-path sums are split into fixed-size chunks whose partial results are
//! added in chunk order, so the floating-point result does not depend on the
//! number of worker threads.

use rayon::prelude::*;
use std::ops::Range;

/// Paths per reduction chunk.
pub const CHUNK: usize = 512;

/// Sums `width` accumulators over `0..n`, filled chunk by chunk by `fill`.
pub fn chunked_sum<F>(n: usize, width: usize, fill: F) -> Vec<f64>
where
    F: Fn(Range<usize>, &mut [f64]) + Sync,
{
    let n_chunks = n.div_ceil(CHUNK);
    let partials: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; width];
            fill(c * CHUNK..((c + 1) * CHUNK).min(n), &mut acc);
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for part in &partials {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    total
}

/// Mean and standard error of `values`, reduced deterministically.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let sums = chunked_sum(n, 1, |r, acc| {
        for v in &values[r] {
            acc[0] += v;
        }
    });
    let mean = sums[0] / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss = chunked_sum(n, 1, |r, acc| {
        for v in &values[r] {
            acc[0] += (v - mean) * (v - mean);
        }
    });
    let var = ss[0] / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}
