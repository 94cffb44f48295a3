//! Toy two-dimensional datasets.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dataset {
    Gauss8,
    SwissRoll,
    Checkerboard,
}

impl Dataset {
    pub fn as_str(self) -> &'static str {
        match self {
            Dataset::Gauss8 => "gauss8",
            Dataset::SwissRoll => "swissroll",
            Dataset::Checkerboard => "checkerboard",
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dataset {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss8" => Ok(Dataset::Gauss8),
            "swissroll" => Ok(Dataset::SwissRoll),
            "checkerboard" => Ok(Dataset::Checkerboard),
            other => Err(HarnessError::invalid(format!(
                "unknown dataset {other:?} (expected gauss8, swissroll or checkerboard)"
            ))),
        }
    }
}

pub const GAUSS8_RADIUS: f64 = 2.0;
pub const GAUSS8_SIGMA: f64 = 0.1;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Points before standardisation.
pub fn gen_raw(dataset: Dataset, n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut out = Array2::zeros((n, 2));
    for mut row in out.outer_iter_mut() {
        let (x, y) = match dataset {
            Dataset::Gauss8 => {
                let k = rng.random_range(0..8) as f64;
                let angle = 2.0 * PI * k / 8.0;
                (
                    GAUSS8_RADIUS * angle.cos() + GAUSS8_SIGMA * normal(rng),
                    GAUSS8_RADIUS * angle.sin() + GAUSS8_SIGMA * normal(rng),
                )
            }
            Dataset::SwissRoll => {
                let t = 1.5 * PI * (1.0 + 2.0 * rng.random::<f64>());
                (t * t.cos() + 0.5 * normal(rng), t * t.sin() + 0.5 * normal(rng))
            }
            Dataset::Checkerboard => {
                let x1: f64 = rng.random_range(-2.0..2.0);
                let x2 = rng.random::<f64>() - 2.0 * rng.random_range(0..2) as f64;
                (x1, x2 + (x1.floor() as i64).rem_euclid(2) as f64)
            }
        };
        row[0] = x;
        row[1] = y;
    }
    out
}

/// Shifts and scales every column to zero mean and unit (population) variance.
pub fn standardize(x: &mut Array2<f64>) {
    let n = x.nrows() as f64;
    for mut col in x.axis_iter_mut(Axis(1)) {
        let mean = col.sum() / n;
        col.mapv_inplace(|v| v - mean);
        let std = (col.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        if std > 0.0 {
            col.mapv_inplace(|v| v / std);
        }
    }
}

/// `n` standardised points of `dataset`.
pub fn gen_dataset(dataset: Dataset, n: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    if n < 1 {
        return Err(HarnessError::invalid("dataset size must be at least 1"));
    }
    let mut x = gen_raw(dataset, n, rng);
    standardize(&mut x);
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn seeded_and_standardised() {
        for ds in [Dataset::Gauss8, Dataset::SwissRoll, Dataset::Checkerboard] {
            let a = gen_dataset(ds, 500, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let b = gen_dataset(ds, 500, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert_eq!(a, b);
            for col in a.axis_iter(Axis(1)) {
                assert!(col.mean().unwrap().abs() < 1e-12);
                let var = col.iter().map(|v| v * v).sum::<f64>() / 500.0;
                assert!((var - 1.0).abs() < 1e-12);
            }
        }
        assert!(gen_dataset(Dataset::Gauss8, 0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
        assert!("moons".parse::<Dataset>().is_err());
    }
}
