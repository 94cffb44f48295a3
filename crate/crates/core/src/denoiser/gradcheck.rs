//! Central finite-difference check of [`Denoiser::backward`].

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{build_denoiser, jitter_params, BlockKind, Denoiser, DenoiserConfig, RoutingVariant};
use crate::diffusion::standard_normal;
use crate::masks::{MaskBank, MaskSpec};
use crate::Result;

/// Step of the central difference.
pub const FD_STEP: f64 = 1e-6;
/// Denominator floor of the relative error. Gradients smaller than this are
/// compared in absolute terms, where the finite difference itself carries
/// about `1e-16 / FD_STEP` of roundoff.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: (String, usize),
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// A small seeded problem: network with jittered parameters, a DTR bank with
/// half the channels active, noisy inputs, targets, timesteps and weights.
pub struct Problem {
    pub model: Denoiser,
    pub bank: MaskBank,
    pub x_t: Array2<f64>,
    pub eps: Array2<f64>,
    pub timesteps: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Problem {
    pub fn new(width: usize, n_blocks: usize, routing: RoutingVariant, block: BlockKind, seed: u64) -> Result<Self> {
        let config = DenoiserConfig {
            data_dim: 2,
            width,
            n_blocks,
            block,
            routing,
            temb_dim: 8,
        };
        let mut model = build_denoiser(config, seed)?;
        jitter_params(model.params_mut(), 0.3, seed ^ 0x9e37_79b9_7f4a_7c15);
        let tasks = 10;
        let bank = MaskSpec::dtr(tasks, width, 1.0, 0.5).build()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let batch = 6;
        let x_t = standard_normal(&mut rng, batch, 2);
        let eps = standard_normal(&mut rng, batch, 2);
        let timesteps = (0..batch).map(|_| rng.random_range(1..=tasks)).collect();
        let weights = (0..batch).map(|_| rng.random_range(0.5..1.5)).collect();
        Ok(Problem {
            model,
            bank,
            x_t,
            eps,
            timesteps,
            weights,
        })
    }

    pub fn loss(&self, model: &Denoiser) -> Result<f64> {
        Ok(model
            .backward(self.x_t.view(), &self.timesteps, self.eps.view(), &self.bank, &self.weights)?
            .0)
    }
}

/// Compares every analytic gradient entry with a central difference.
pub fn check(problem: &Problem) -> Result<GradcheckReport> {
    let (_, grads) = problem.model.backward(
        problem.x_t.view(),
        &problem.timesteps,
        problem.eps.view(),
        &problem.bank,
        &problem.weights,
    )?;
    let mut probe = problem.model.clone();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        checked: 0,
    };
    for (ti, tensor) in grads.tensors().iter().enumerate() {
        for (k, &analytic) in tensor.data.iter().enumerate() {
            let original = probe.params().tensors()[ti].data[k];
            probe.params_mut().tensors_mut()[ti].data[k] = original + FD_STEP;
            let plus = problem.loss(&probe)?;
            probe.params_mut().tensors_mut()[ti].data[k] = original - FD_STEP;
            let minus = problem.loss(&probe)?;
            probe.params_mut().tensors_mut()[ti].data[k] = original;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(analytic, numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (tensor.name.clone(), k);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
