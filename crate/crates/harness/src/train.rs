//! Training loop.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use dtr_core::checkpoint::Checkpoint;
use dtr_core::denoiser::{build_denoiser, Denoiser};
use dtr_core::diffusion::{q_sample_batch, standard_normal};
use dtr_core::masks::MaskBank;
use dtr_core::params::TrainState;
use dtr_core::schedule::cosine_schedule;

use crate::config::RunConfig;
use crate::data::gen_dataset;
use crate::error::{HarnessError, Result};
use crate::seeds;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Step 0 holds the loss of the first batch before any update; later
    /// records average the losses since the previous record.
    pub loss: f64,
    pub swd: Option<f64>,
    pub wallclock_ms: u64,
}

pub struct TrainOutput {
    pub state: TrainState,
    pub metrics: Vec<MetricsRecord>,
    pub bank: MaskBank,
    /// Network holding the final raw parameters.
    pub model: Denoiser,
}

impl TrainOutput {
    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        Checkpoint {
            params: self.state.params.clone(),
            ema: self.state.ema.clone(),
            step: self.state.step,
            mask: cfg.mask_spec(),
            model: cfg.denoiser_config(),
        }
    }

    /// Network holding the EMA parameters.
    pub fn ema_model(&self) -> Result<Denoiser> {
        Ok(self.model.with_params(self.state.ema.clone())?)
    }

    pub fn initial_loss(&self) -> f64 {
        self.metrics.first().map_or(f64::NAN, |m| m.loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.metrics.last().map_or(f64::NAN, |m| m.loss)
    }
}

/// Trains from scratch. With `out_dir` set, writes `metrics.jsonl` and
/// `checkpoint.bin` there.
pub fn train(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let schedule = cosine_schedule(cfg.timesteps)?;
    let weights = cfg.weight_scheme()?;
    let data = gen_dataset(cfg.dataset, cfg.n_train, &mut seeds::stream(cfg.seed, seeds::DATA))?;
    let bank = cfg.mask_spec().build()?;
    let mut model = build_denoiser(cfg.denoiser_config(), seeds::stream_seed(cfg.seed, seeds::INIT))?;
    let mut state = TrainState::new(model.params().clone(), cfg.lr);
    let mut rng = seeds::stream(cfg.seed, seeds::TRAIN_NOISE);

    let mut metrics = Vec::new();
    let mut window = 0.0;
    let mut window_len = 0usize;
    let mut x0 = Array2::zeros((cfg.batch, 2));
    for step in 1..=cfg.steps {
        for mut row in x0.outer_iter_mut() {
            row.assign(&data.row(rng.random_range(0..cfg.n_train)));
        }
        let ts: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(1..=cfg.timesteps)).collect();
        let eps = standard_normal(&mut rng, cfg.batch, 2);
        let x_t = q_sample_batch(x0.view(), &ts, eps.view(), &schedule)?;
        let w = ts.iter().map(|&t| weights.weight(t)).collect::<dtr_core::Result<Vec<_>>>()?;

        std::mem::swap(model.params_mut(), &mut state.params);
        let result = model.backward(x_t.view(), &ts, eps.view(), &bank, &w);
        std::mem::swap(model.params_mut(), &mut state.params);
        let (loss, grads) = result?;
        if !loss.is_finite() {
            return Err(HarnessError::NonFinite { step, loss });
        }
        if step == 1 {
            metrics.push(MetricsRecord {
                step: 0,
                loss,
                swd: None,
                wallclock_ms: started.elapsed().as_millis() as u64,
            });
        }
        state.apply_gradients(&grads, cfg.ema_decay_at(state.step + 1))?;
        window += loss;
        window_len += 1;
        if step % cfg.log_every == 0 || step == cfg.steps {
            metrics.push(MetricsRecord {
                step,
                loss: window / window_len as f64,
                swd: None,
                wallclock_ms: started.elapsed().as_millis() as u64,
            });
            window = 0.0;
            window_len = 0;
        }
    }
    *model.params_mut() = state.params.clone();

    let output = TrainOutput {
        state,
        metrics,
        bank,
        model,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        write_metrics(&dir.join(METRICS_FILE), &output.metrics)?;
        let path = dir.join(CHECKPOINT_FILE);
        output
            .checkpoint(cfg)
            .save(&path)
            .map_err(|e| match e {
                dtr_core::Error::Io(io) => HarnessError::io(&path, io),
                other => other.into(),
            })?;
    }
    Ok(output)
}

pub fn write_metrics(path: &Path, metrics: &[MetricsRecord]) -> Result<()> {
    let mut text = Vec::new();
    for m in metrics {
        serde_json::to_writer(&mut text, m)?;
        text.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    file.write_all(&text).map_err(|e| HarnessError::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
