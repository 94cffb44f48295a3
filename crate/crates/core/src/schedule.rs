//! Noise schedules.

use std::f64::consts::FRAC_PI_2;

use crate::{Error, Result};

/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper bound applied to every per-step `beta_t` of the cosine schedule.
pub const MAX_BETA: f64 = 0.999;

/// Cumulative signal coefficients `alpha_bar[0..=T]` with `alpha_bar[0] = 1`.
///
/// Timesteps are 1-based; `alpha(t)` and `beta(t)` are the per-step
/// quantities `alpha_bar[t] / alpha_bar[t-1]` and `1 - alpha(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Wraps an explicit `alpha_bar` table (index 0 must be 1, values in
    /// `[0, 1]`). Used for synthetic schedules in tests and for respacing.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::invalid(
                "noise schedule",
                "need alpha_bar for at least one timestep",
            ));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::invalid("noise schedule", "alpha_bar[0] must equal 1"));
        }
        if let Some((t, v)) = alpha_bar
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::invalid(
                "noise schedule",
                format!("alpha_bar[{t}] = {v} is outside [0, 1]"),
            ));
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `alpha_bar[t]`, `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha_bar[t] / self.alpha_bar[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alpha(t)
    }

    pub(crate) fn check_timestep(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(Error::OutOfRange {
                what: "timestep",
                index: t,
                lo: 1,
                hi: self.steps(),
            });
        }
        Ok(())
    }
}

/// `cos^2(((t/T + s) / (1 + s)) * pi/2)`, evaluated as the squared sine of
/// the complementary angle `((T - t) / T / (1 + s)) * pi/2` so that values
/// near `t = T` keep full relative precision.
fn cosine_f(t: usize, steps: usize) -> f64 {
    let angle = ((steps - t) as f64 / steps as f64 / (1.0 + COSINE_OFFSET)) * FRAC_PI_2;
    angle.sin().powi(2)
}

/// Cosine schedule: `alpha_bar[t] = f(t) / f(0)` with
/// `f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)`, `s = 0.008`.
///
/// Any step whose `beta_t = 1 - f(t)/f(t-1)` would exceed 0.999 is clamped,
/// and from that step on `alpha_bar` continues as the running product.
pub fn cosine_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::invalid("noise schedule", "T must be at least 1"));
    }
    let f0 = cosine_f(0, steps);
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    let mut clamped = false;
    for t in 1..=steps {
        let prev = alpha_bar[t - 1];
        let beta = 1.0 - cosine_f(t, steps) / cosine_f(t - 1, steps);
        if clamped || beta > MAX_BETA {
            clamped = true;
            alpha_bar.push(prev * (1.0 - beta.min(MAX_BETA)));
        } else {
            alpha_bar.push(cosine_f(t, steps) / f0);
        }
    }
    Ok(NoiseSchedule { alpha_bar })
}

/// An evenly strided subsequence of timesteps together with the schedule
/// restricted to them.
#[derive(Debug, Clone, PartialEq)]
pub struct Respaced {
    /// Original timesteps `tau_1 < ... < tau_n = T`.
    pub timesteps: Vec<usize>,
    /// Schedule over `n` steps with `alpha_bar[k] = original alpha_bar[tau_k]`.
    pub schedule: NoiseSchedule,
}

/// Keeps `n_steps` timesteps `tau_k = round(k * T / n_steps)`, `k = 1..=n_steps`
/// (halves rounded up), which always includes `T`.
pub fn respace(schedule: &NoiseSchedule, n_steps: usize) -> Result<Respaced> {
    let total = schedule.steps();
    if n_steps < 1 || n_steps > total {
        return Err(Error::invalid(
            "sampling steps",
            format!("need 1 <= n_steps <= T = {total}, got {n_steps}"),
        ));
    }
    let timesteps: Vec<usize> = (1..=n_steps)
        .map(|k| (2 * k * total + n_steps) / (2 * n_steps))
        .collect();
    let mut alpha_bar = Vec::with_capacity(n_steps + 1);
    alpha_bar.push(schedule.alpha_bar(0));
    alpha_bar.extend(timesteps.iter().map(|&t| schedule.alpha_bar(t)));
    Ok(Respaced {
        timesteps,
        schedule: NoiseSchedule { alpha_bar },
    })
}
