//! Sliced 1-Wasserstein distance between point sets.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dtr_core::diffusion::standard_normal;

use crate::error::{HarnessError, Result};

/// `n_proj x d` matrix of seeded unit directions.
pub fn projection_directions(n_proj: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dirs = standard_normal(&mut rng, n_proj, d);
    for mut row in dirs.outer_iter_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    dirs
}

/// Quantile of sorted `xs` at level `q` in `(0, 1)`, placing `xs[i]` at
/// `(i + 0.5) / n` and interpolating linearly in between.
fn quantile(xs: &[f64], q: f64) -> f64 {
    let n = xs.len();
    let pos = (q * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    xs[lo] + frac * (xs[hi] - xs[lo])
}

/// One-dimensional W1 between two empirical distributions. Unequal sizes are
/// compared on a common grid of `max(n, m)` quantile levels.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    let n = a.len().max(b.len());
    (0..n)
        .map(|k| {
            let q = (k as f64 + 0.5) / n as f64;
            (quantile(&a, q) - quantile(&b, q)).abs()
        })
        .sum::<f64>()
        / n as f64
}

pub fn evaluate_swd(
    samples: ArrayView2<f64>,
    reference: ArrayView2<f64>,
    n_proj: usize,
    seed: u64,
) -> Result<f64> {
    if samples.ncols() != reference.ncols() {
        return Err(HarnessError::invalid(format!(
            "dimension mismatch: samples have {} columns, reference has {}",
            samples.ncols(),
            reference.ncols()
        )));
    }
    if samples.nrows() == 0 || reference.nrows() == 0 || n_proj == 0 {
        return Err(HarnessError::invalid("swd needs non-empty sets and at least one projection"));
    }
    let dirs = projection_directions(n_proj, samples.ncols(), seed);
    let pa = samples.dot(&dirs.t());
    let pb = reference.dot(&dirs.t());
    let total: f64 = (0..n_proj)
        .map(|k| wasserstein_1d(&pa.column(k).to_vec(), &pb.column(k).to_vec()))
        .sum();
    Ok(total / n_proj as f64)
}
