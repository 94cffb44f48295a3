//! Sampling and evaluation of trained runs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use dtr_core::checkpoint::Checkpoint;
use dtr_core::denoiser::Denoiser;
use dtr_core::diffusion::{ancestral_sample_with, SamplerOptions};
use dtr_core::masks::MaskBank;
use dtr_core::schedule::cosine_schedule;

use crate::config::RunConfig;
use crate::data::gen_dataset;
use crate::error::{HarnessError, Result};
use crate::seeds;
use crate::swd::evaluate_swd;

/// Network and mask bank restored from a checkpoint, holding the EMA
/// parameters unless `raw` is set.
pub fn load_model(path: &Path, raw: bool) -> Result<(Denoiser, MaskBank, Checkpoint)> {
    let ckpt = Checkpoint::load(path).map_err(|e| match e {
        dtr_core::Error::Io(io) => HarnessError::io(path, io),
        other => other.into(),
    })?;
    let params = if raw { ckpt.params.clone() } else { ckpt.ema.clone() };
    let model = Denoiser::from_params(ckpt.model, params)?;
    let bank = ckpt.mask.build()?;
    Ok((model, bank, ckpt))
}

/// Ancestral samples over `sample_steps` respaced steps of the cosine
/// schedule with `T = bank.tasks()`.
pub fn generate(
    model: &Denoiser,
    bank: &MaskBank,
    sample_steps: usize,
    n: usize,
    seed: u64,
    options: SamplerOptions,
) -> Result<Array2<f64>> {
    let schedule = cosine_schedule(bank.tasks())?;
    Ok(ancestral_sample_with(&model.with_bank(bank), &schedule, sample_steps, seed, n, options)?)
}

/// Held-out reference draws for a run's dataset.
pub fn reference_set(cfg: &RunConfig) -> Result<Array2<f64>> {
    gen_dataset(cfg.dataset, cfg.eval.reference, &mut seeds::stream(cfg.seed, seeds::REFERENCE))
}

/// SWD of `samples` against the run's reference set.
pub fn score(cfg: &RunConfig, samples: &Array2<f64>) -> Result<f64> {
    let reference = reference_set(cfg)?;
    evaluate_swd(
        samples.view(),
        reference.view(),
        cfg.eval.projections,
        seeds::stream_seed(cfg.seed, seeds::PROJECTIONS),
    )
}

/// Header `x0,x1,...` then one row per point with round-trip precision.
pub fn points_to_csv(points: &Array2<f64>) -> String {
    let header: Vec<String> = (0..points.ncols()).map(|j| format!("x{j}")).collect();
    let mut out = header.join(",");
    out.push('\n');
    for row in points.outer_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

pub fn write_points(path: &Path, points: &Array2<f64>) -> Result<()> {
    fs::write(path, points_to_csv(points)).map_err(|e| HarnessError::io(path, e))
}

pub fn read_points(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| HarnessError::invalid(format!("{}: empty file", path.display())))?;
    let cols = header.split(',').count();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols {
            return Err(HarnessError::invalid(format!(
                "{}: line {} has {} values, expected {cols}",
                path.display(),
                i + 2,
                cells.len()
            )));
        }
        for c in cells {
            data.push(c.trim().parse::<f64>().map_err(|_| {
                HarnessError::invalid(format!("{}: line {}: bad number {c:?}", path.display(), i + 2))
            })?);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| HarnessError::invalid(e.to_string()))
}
