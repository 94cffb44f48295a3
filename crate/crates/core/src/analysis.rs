//! Representation similarity across timesteps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::Denoiser;
use crate::diffusion::{q_sample_batch, standard_normal};
use crate::masks::{self, MaskBank};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

fn centered(x: ArrayView2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("at least one row");
    &x - &mean
}

fn frobenius_sq(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Linear CKA between two feature matrices with the same rows:
/// `||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)` on column-centred inputs.
/// Returns 0 when either centred matrix vanishes.
pub fn linear_cka(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::shape("linear_cka rows", x.nrows(), y.nrows()));
    }
    if x.nrows() < 2 {
        return Err(Error::invalid("linear_cka", "need at least 2 rows"));
    }
    let xc = centered(x);
    let yc = centered(y);
    if xc.iter().all(|&v| v == 0.0) || yc.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let cross = frobenius_sq(&yc.t().dot(&xc));
    let xx = frobenius_sq(&xc.t().dot(&xc)).sqrt();
    let yy = frobenius_sq(&yc.t().dot(&yc)).sqrt();
    Ok(cross / (xx * yy))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CkaMatrix {
    pub block: usize,
    pub timesteps: Vec<usize>,
    /// `K x K`, entry `(a, b)` compares the block output at `timesteps[a]`
    /// with the one at `timesteps[b]`.
    pub values: Array2<f64>,
}

impl CkaMatrix {
    /// CSV: first line is the block index followed by the probed timesteps,
    /// then `K` rows of `K` values clamped to `[0, 1]` with 10 significant
    /// digits.
    pub fn to_csv(&self) -> String {
        let mut out = self.block.to_string();
        for t in &self.timesteps {
            let _ = write!(out, ",{t}");
        }
        out.push('\n');
        for row in self.values.outer_iter() {
            let cells: Vec<String> = row.iter().map(|v| format!("{:.9e}", v.clamp(0.0, 1.0))).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Mean of the entries one probe apart and the mean of the entries at
    /// the largest probe separation.
    pub fn band_means(&self) -> (f64, f64) {
        let k = self.timesteps.len();
        if k < 2 {
            return (1.0, 1.0);
        }
        let near: Vec<f64> = (0..k - 1).map(|a| self.values[[a, a + 1]]).collect();
        let far = self.values[[0, k - 1]];
        (near.iter().sum::<f64>() / near.len() as f64, far)
    }
}

/// `k` timesteps evenly spread over `1..=T`, both ends included.
pub fn probe_timesteps(steps: usize, k: usize) -> Vec<usize> {
    if k <= 1 || steps == 1 {
        return vec![steps.max(1); k.min(1)];
    }
    let mut out: Vec<usize> = (0..k)
        .map(|i| 1 + ((i * (steps - 1)) as f64 / (k - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

/// CKA matrix of block `block` over explicit per-timestep inputs.
pub fn cka_from_inputs(
    model: &Denoiser,
    bank: &MaskBank,
    inputs: &[(usize, Array2<f64>)],
    block: usize,
) -> Result<CkaMatrix> {
    if block >= model.config().n_blocks {
        return Err(Error::OutOfRange {
            what: "block",
            index: block,
            lo: 0,
            hi: model.config().n_blocks - 1,
        });
    }
    if inputs.is_empty() {
        return Err(Error::invalid("cka probe", "need at least one timestep"));
    }
    let mut traces = Vec::with_capacity(inputs.len());
    for (t, x) in inputs {
        if x.nrows() < 2 {
            return Err(Error::invalid("cka probe", "batch size must be at least 2"));
        }
        let (_, trace) = model.forward_traced(x.view(), &vec![*t; x.nrows()], bank)?;
        traces.push(trace.blocks.into_iter().nth(block).expect("block index checked"));
    }
    let k = traces.len();
    let mut values = Array2::zeros((k, k));
    for a in 0..k {
        values[[a, a]] = linear_cka(traces[a].view(), traces[a].view())?;
        for b in a + 1..k {
            let v = linear_cka(traces[a].view(), traces[b].view())?;
            values[[a, b]] = v;
            values[[b, a]] = v;
        }
    }
    Ok(CkaMatrix {
        block,
        timesteps: inputs.iter().map(|(t, _)| *t).collect(),
        values,
    })
}

/// Diffuses the fixed batch `x0` to every probed timestep with one shared
/// seeded noise draw and compares the recorded block outputs pairwise.
pub fn cka_timestep_matrix(
    model: &Denoiser,
    bank: &MaskBank,
    schedule: &NoiseSchedule,
    x0: ArrayView2<f64>,
    timesteps: &[usize],
    block: usize,
    seed: u64,
) -> Result<CkaMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = standard_normal(&mut rng, x0.nrows(), x0.ncols());
    let inputs = timesteps
        .iter()
        .map(|&t| Ok((t, q_sample_batch(x0, &vec![t; x0.nrows()], eps.view(), schedule)?)))
        .collect::<Result<Vec<_>>>()?;
    cka_from_inputs(model, bank, &inputs, block)
}

/// Writes the mask bank as a PGM image (rows = timesteps).
pub fn mask_heatmap_export(bank: &MaskBank, path: impl AsRef<Path>) -> Result<()> {
    masks::write_mask_pgm(bank, path)
}

/// Writes the overlap matrix as a PGM image scaled to `maxval = C_beta`.
pub fn overlap_heatmap_export(bank: &MaskBank, path: impl AsRef<Path>) -> Result<()> {
    masks::write_overlap_pgm(bank, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn self_similarity_and_scale() {
        let x = array![[1.0, 2.0], [0.5, -1.0], [3.0, 0.0], [-2.0, 1.5]];
        assert!((linear_cka(x.view(), x.view()).unwrap() - 1.0).abs() < 1e-12);
        let scaled = &x * -3.5;
        assert!((linear_cka(x.view(), scaled.view()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        let x = array![[1.0, 2.0], [1.0, 2.0]];
        let y = array![[0.0], [1.0]];
        assert_eq!(linear_cka(x.view(), y.view()).unwrap(), 0.0);
        assert!(linear_cka(array![[1.0]].view(), array![[1.0]].view()).is_err());
        assert!(linear_cka(x.view(), array![[1.0], [2.0], [3.0]].view()).is_err());
    }

    #[test]
    fn probe_grid() {
        assert_eq!(probe_timesteps(1000, 16).len(), 16);
        assert_eq!(probe_timesteps(1000, 16)[0], 1);
        assert_eq!(*probe_timesteps(1000, 16).last().unwrap(), 1000);
        assert_eq!(probe_timesteps(4, 4), vec![1, 2, 3, 4]);
        assert_eq!(probe_timesteps(10, 1), vec![10]);
    }

    #[test]
    fn csv_layout() {
        let m = CkaMatrix {
            block: 2,
            timesteps: vec![1, 500],
            values: array![[1.0, 0.25], [0.25, 1.0000000001]],
        };
        assert_eq!(
            m.to_csv(),
            "2,1,500\n1.000000000e0,2.500000000e-1\n2.500000000e-1,1.000000000e0\n"
        );
    }
}
