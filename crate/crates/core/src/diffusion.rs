//! Forward noising, the noise-prediction objective and ancestral sampling.

use ndarray::{Array2, ArrayView1, ArrayView2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::schedule::{respace, NoiseSchedule};
use crate::{Error, Result};

/// `sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_timestep(t)?;
    if x0.len() != eps.len() {
        return Err(Error::shape("q_sample", x0.len(), eps.len()));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Row-wise [`q_sample`] with one timestep per row.
pub fn q_sample_batch(
    x0: ArrayView2<f64>,
    timesteps: &[usize],
    eps: ArrayView2<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if x0.dim() != eps.dim() {
        return Err(Error::shape(
            "q_sample_batch",
            format!("{:?}", x0.dim()),
            format!("{:?}", eps.dim()),
        ));
    }
    if timesteps.len() != x0.nrows() {
        return Err(Error::shape("q_sample_batch timesteps", x0.nrows(), timesteps.len()));
    }
    let mut out = Array2::zeros(x0.dim());
    for (i, &t) in timesteps.iter().enumerate() {
        schedule.check_timestep(t)?;
        let ab = schedule.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Zip::from(out.row_mut(i))
            .and(x0.row(i))
            .and(eps.row(i))
            .for_each(|o, &x, &e| *o = a * x + b * e);
    }
    Ok(out)
}

/// Mean over the batch of `weight_i * mean_j (eps_true - eps_pred)^2`.
pub fn ddpm_loss(
    eps_true: ArrayView2<f64>,
    eps_pred: ArrayView2<f64>,
    weights: ArrayView1<f64>,
) -> Result<f64> {
    if eps_true.dim() != eps_pred.dim() {
        return Err(Error::shape(
            "ddpm_loss",
            format!("{:?}", eps_true.dim()),
            format!("{:?}", eps_pred.dim()),
        ));
    }
    if weights.len() != eps_true.nrows() {
        return Err(Error::shape("ddpm_loss weights", eps_true.nrows(), weights.len()));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::invalid("loss weight", format!("weights must be >= 0, got {w}")));
    }
    let (n, d) = eps_true.dim();
    if n == 0 || d == 0 {
        return Ok(0.0);
    }
    let total: f64 = eps_true
        .outer_iter()
        .zip(eps_pred.outer_iter())
        .zip(weights)
        .map(|((a, b), w)| {
            let se: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            w * se / d as f64
        })
        .sum();
    Ok(total / n as f64)
}

/// Per-timestep loss weighting hook.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum WeightScheme {
    #[default]
    Uniform,
    /// `table[t - 1]` is the weight of timestep `t`.
    Table(Vec<f64>),
}

impl WeightScheme {
    /// Table scheme covering exactly `steps` timesteps.
    pub fn table(values: Vec<f64>, steps: usize) -> Result<Self> {
        if values.len() != steps {
            return Err(Error::invalid(
                "weight table",
                format!("expected {steps} entries, got {}", values.len()),
            ));
        }
        if let Some(w) = values.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("weight table", format!("entries must be finite and >= 0, got {w}")));
        }
        Ok(WeightScheme::Table(values))
    }

    pub fn weight(&self, t: usize) -> Result<f64> {
        loss_weight(t, self)
    }
}

pub fn loss_weight(t: usize, scheme: &WeightScheme) -> Result<f64> {
    match scheme {
        WeightScheme::Uniform => Ok(1.0),
        WeightScheme::Table(table) => {
            if t < 1 || t > table.len() {
                return Err(Error::OutOfRange {
                    what: "weight table timestep",
                    index: t,
                    lo: 1,
                    hi: table.len(),
                });
            }
            Ok(table[t - 1])
        }
    }
}

/// Anything that predicts the injected noise for a batch at per-row
/// timesteps (1-based, in the original `1..=T` numbering).
pub trait NoisePredictor {
    fn data_dim(&self) -> usize;
    fn predict_noise(&self, x: ArrayView2<f64>, timesteps: &[usize]) -> Result<Array2<f64>>;
}

/// Draws a `rows x cols` standard normal matrix.
pub fn standard_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Options of [`ancestral_sample_with`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SamplerOptions {
    /// Clamp the implied clean estimate
    /// `x0 = (x - sqrt(1 - alpha_bar_k) * eps) / sqrt(alpha_bar_k)` to
    /// `[-c, c]` before forming the posterior mean.
    pub clip_x0: Option<f64>,
}

/// Ancestral DDPM sampling over `n_steps` respaced timesteps.
///
/// Starting from `x ~ N(0, I)`, each retained step `k` (original timestep
/// `tau_k`) computes
/// `x <- (x - beta_k / sqrt(1 - alpha_bar_k) * eps) / sqrt(alpha_k) + sigma_k * z`
/// with `sigma_k^2 = (1 - alpha_bar_{k-1}) / (1 - alpha_bar_k) * beta_k`,
/// where all quantities are those of the respaced schedule. No noise is added
/// at the final step.
pub fn ancestral_sample(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    n_steps: usize,
    seed: u64,
    n_samples: usize,
) -> Result<Array2<f64>> {
    ancestral_sample_with(model, schedule, n_steps, seed, n_samples, SamplerOptions::default())
}

/// [`ancestral_sample`] with options. When `clip_x0` is set, the posterior
/// mean is formed from the clamped clean estimate,
/// `sqrt(alpha_bar_{k-1}) beta_k / (1 - alpha_bar_k) * x0
///  + sqrt(alpha_k) (1 - alpha_bar_{k-1}) / (1 - alpha_bar_k) * x`,
/// which equals the noise form whenever the clamp is inactive.
pub fn ancestral_sample_with(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    n_steps: usize,
    seed: u64,
    n_samples: usize,
    options: SamplerOptions,
) -> Result<Array2<f64>> {
    if let Some(c) = options.clip_x0 {
        if !(c > 0.0) {
            return Err(Error::invalid("sampler clip", format!("must be positive, got {c}")));
        }
    }
    let respaced = respace(schedule, n_steps)?;
    let sched = &respaced.schedule;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.data_dim();
    let mut x = standard_normal(&mut rng, n_samples, d);
    for k in (1..=n_steps).rev() {
        let t_orig = respaced.timesteps[k - 1];
        let eps = model.predict_noise(x.view(), &vec![t_orig; n_samples])?;
        let alpha = sched.alpha(k);
        let beta = 1.0 - alpha;
        let ab = sched.alpha_bar(k);
        let ab_prev = sched.alpha_bar(k - 1);
        match options.clip_x0 {
            None => {
                let coef = beta / (1.0 - ab).sqrt();
                let inv_sqrt_alpha = 1.0 / alpha.sqrt();
                Zip::from(&mut x)
                    .and(&eps)
                    .for_each(|xv, &e| *xv = inv_sqrt_alpha * (*xv - coef * e));
            }
            Some(c) => {
                let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
                let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
                let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                Zip::from(&mut x).and(&eps).for_each(|xv, &e| {
                    let x0 = ((*xv - sb * e) / sa).clamp(-c, c);
                    *xv = c0 * x0 + ct * *xv;
                });
            }
        }
        if k > 1 {
            let var = (1.0 - ab_prev) / (1.0 - ab) * beta;
            let sigma = var.sqrt();
            let z = standard_normal(&mut rng, n_samples, d);
            x.scaled_add(sigma, &z);
        }
    }
    Ok(x)
}
