//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored, nested fields use dotted keys
//! (`mask.alpha = 4`), unknown keys are rejected and missing keys keep their
//! defaults.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dtr_core::denoiser::{BlockKind, DenoiserConfig, RoutingVariant};
use dtr_core::diffusion::{SamplerOptions, WeightScheme};
use dtr_core::masks::{MaskSpec, Strategy};

use crate::data::Dataset;
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MaskConfig {
    pub strategy: Strategy,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub width: usize,
    pub blocks: usize,
    pub block: BlockKind,
    pub routing: RoutingVariant,
    pub temb_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Generated samples per evaluation.
    pub samples: usize,
    /// Held-out reference points.
    pub reference: usize,
    pub projections: usize,
}

/// Loss weighting: uniform, or a table file of `T` non-negative numbers
/// (whitespace or comma separated) indexed by timestep.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightChoice {
    Uniform,
    Table(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Dataset,
    pub n_train: usize,
    /// Diffusion steps `T`.
    pub timesteps: usize,
    /// Training iterations.
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub sample_steps: usize,
    /// Clamp of the sampler's clean estimate; 0 disables it.
    pub sample_clip: f64,
    /// Ramp the EMA decay as `min(ema_decay, (1 + n) / (10 + n))` after `n`
    /// updates.
    pub ema_warmup: bool,
    pub weight_scheme: WeightChoice,
    pub log_every: usize,
    pub mask: MaskConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: Dataset::Gauss8,
            n_train: 10_000,
            timesteps: 1000,
            steps: 5000,
            batch: 128,
            lr: 1e-4,
            ema_decay: 0.9999,
            seed: 0,
            sample_steps: 250,
            sample_clip: 3.0,
            ema_warmup: true,
            weight_scheme: WeightChoice::Uniform,
            log_every: 100,
            mask: MaskConfig {
                strategy: Strategy::Dtr,
                alpha: 4.0,
                beta: 0.8,
            },
            model: ModelConfig {
                width: 64,
                blocks: 4,
                block: BlockKind::Adm,
                routing: RoutingVariant::AdmStyle,
                temb_dim: 32,
            },
            eval: EvalConfig {
                samples: 4000,
                reference: 10_000,
                projections: 128,
            },
        }
    }
}

pub const KEYS: &[&str] = &[
    "dataset",
    "n_train",
    "T",
    "steps",
    "batch",
    "lr",
    "ema_decay",
    "seed",
    "sample_steps",
    "sample_clip",
    "ema_warmup",
    "weight_scheme",
    "log_every",
    "mask.strategy",
    "mask.alpha",
    "mask.beta",
    "model.width",
    "model.blocks",
    "model.block",
    "model.routing",
    "model.temb_dim",
    "eval.samples",
    "eval.reference",
    "eval.projections",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("cannot parse {value:?} as the value of {key}"))
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "dataset" => self.dataset = value.parse().map_err(|e: HarnessError| e.to_string())?,
            "n_train" => self.n_train = parse_value(key, value)?,
            "T" => self.timesteps = parse_value(key, value)?,
            "steps" => self.steps = parse_value(key, value)?,
            "batch" => self.batch = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "ema_decay" => self.ema_decay = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "sample_steps" => self.sample_steps = parse_value(key, value)?,
            "sample_clip" => self.sample_clip = parse_value(key, value)?,
            "ema_warmup" => self.ema_warmup = parse_value(key, value)?,
            "weight_scheme" => {
                self.weight_scheme = if value == "uniform" {
                    WeightChoice::Uniform
                } else if let Some(path) = value.strip_prefix("table:") {
                    WeightChoice::Table(PathBuf::from(path))
                } else {
                    return Err(format!("weight_scheme must be uniform or table:<path>, got {value:?}"));
                }
            }
            "log_every" => self.log_every = parse_value(key, value)?,
            "mask.strategy" => self.mask.strategy = value.parse().map_err(|e: dtr_core::Error| e.to_string())?,
            "mask.alpha" => self.mask.alpha = parse_value(key, value)?,
            "mask.beta" => self.mask.beta = parse_value(key, value)?,
            "model.width" => self.model.width = parse_value(key, value)?,
            "model.blocks" => self.model.blocks = parse_value(key, value)?,
            "model.block" => self.model.block = value.parse().map_err(|e: dtr_core::Error| e.to_string())?,
            "model.routing" => {
                self.model.routing = value.parse().map_err(|e: dtr_core::Error| e.to_string())?
            }
            "model.temb_dim" => self.model.temb_dim = parse_value(key, value)?,
            "eval.samples" => self.eval.samples = parse_value(key, value)?,
            "eval.reference" => self.eval.reference = parse_value(key, value)?,
            "eval.projections" => self.eval.projections = parse_value(key, value)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_train", self.n_train),
            ("T", self.timesteps),
            ("batch", self.batch),
            ("sample_steps", self.sample_steps),
            ("log_every", self.log_every),
            ("eval.samples", self.eval.samples),
            ("eval.reference", self.eval.reference),
            ("eval.projections", self.eval.projections),
        ];
        for (name, v) in positive {
            if v < 1 {
                return Err(HarnessError::invalid(format!("{name} must be at least 1")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(HarnessError::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(HarnessError::invalid(format!(
                "ema_decay must lie in [0, 1), got {}",
                self.ema_decay
            )));
        }
        if !(self.sample_clip >= 0.0 && self.sample_clip.is_finite()) {
            return Err(HarnessError::invalid(format!(
                "sample_clip must be finite and >= 0, got {}",
                self.sample_clip
            )));
        }
        if self.sample_steps > self.timesteps {
            return Err(HarnessError::invalid(format!(
                "sample_steps ({}) exceeds T ({})",
                self.sample_steps, self.timesteps
            )));
        }
        self.mask_spec().validate()?;
        self.denoiser_config().validate()?;
        Ok(())
    }

    /// Mask spec over `T` tasks and `model.width` channels; `seed` is only
    /// used by the random strategy.
    pub fn mask_spec_with_seed(&self, seed: u64) -> MaskSpec {
        MaskSpec {
            strategy: self.mask.strategy,
            tasks: self.timesteps,
            channels: self.model.width,
            alpha: self.mask.alpha,
            beta: self.mask.beta,
            seed,
        }
    }

    pub fn mask_spec(&self) -> MaskSpec {
        self.mask_spec_with_seed(crate::seeds::stream_seed(self.seed, crate::seeds::MASK))
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            data_dim: 2,
            width: self.model.width,
            n_blocks: self.model.blocks,
            block: self.model.block,
            routing: self.model.routing,
            temb_dim: self.model.temb_dim,
        }
    }

    pub fn sampler_options(&self) -> SamplerOptions {
        SamplerOptions {
            clip_x0: (self.sample_clip > 0.0).then_some(self.sample_clip),
        }
    }

    /// EMA decay applied at update number `n` (1-based).
    pub fn ema_decay_at(&self, n: u64) -> f64 {
        if self.ema_warmup {
            self.ema_decay.min((1.0 + n as f64) / (10.0 + n as f64))
        } else {
            self.ema_decay
        }
    }

    pub fn weight_scheme(&self) -> Result<WeightScheme> {
        match &self.weight_scheme {
            WeightChoice::Uniform => Ok(WeightScheme::Uniform),
            WeightChoice::Table(path) => {
                let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
                let values = text
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<f64>()
                            .map_err(|_| HarnessError::invalid(format!("bad weight {s:?} in {}", path.display())))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(WeightScheme::table(values, self.timesteps)?)
            }
        }
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "dataset" => self.dataset.to_string(),
            "n_train" => self.n_train.to_string(),
            "T" => self.timesteps.to_string(),
            "steps" => self.steps.to_string(),
            "batch" => self.batch.to_string(),
            "lr" => self.lr.to_string(),
            "ema_decay" => self.ema_decay.to_string(),
            "seed" => self.seed.to_string(),
            "sample_steps" => self.sample_steps.to_string(),
            "sample_clip" => self.sample_clip.to_string(),
            "ema_warmup" => self.ema_warmup.to_string(),
            "weight_scheme" => match &self.weight_scheme {
                WeightChoice::Uniform => "uniform".to_string(),
                WeightChoice::Table(p) => format!("table:{}", p.display()),
            },
            "log_every" => self.log_every.to_string(),
            "mask.strategy" => self.mask.strategy.to_string(),
            "mask.alpha" => self.mask.alpha.to_string(),
            "mask.beta" => self.mask.beta.to_string(),
            "model.width" => self.model.width.to_string(),
            "model.blocks" => self.model.blocks.to_string(),
            "model.block" => self.model.block.to_string(),
            "model.routing" => self.model.routing.to_string(),
            "model.temb_dim" => self.model.temb_dim.to_string(),
            "eval.samples" => self.eval.samples.to_string(),
            "eval.reference" => self.eval.reference.to_string(),
            "eval.projections" => self.eval.projections.to_string(),
            _ => unreachable!("KEYS lists every field"),
        }
    }

    /// Every key in a fixed order; parses back to an equal config.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        out
    }
}

/// Parses config text on top of the defaults and validates the result.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(HarnessError::Config {
                line: line_no,
                message: format!("expected `key = value`, got {line:?}"),
            });
        };
        cfg.set(key.trim(), value.trim())
            .map_err(|message| HarnessError::Config { line: line_no, message })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    parse_config_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.mask.alpha, 4.0);
        assert_eq!(cfg.mask.beta, 0.8);
        assert_eq!(cfg.timesteps, 1000);
        assert_eq!(cfg.sample_steps, 250);
        assert_eq!(cfg.ema_decay, 0.9999);
    }

    #[test]
    fn round_trip() {
        let cfg = parse_config_str("mask.alpha = 4.0\nlr = 3e-4 # faster\nmodel.block = dit\nmodel.routing = dit_style\n")
            .unwrap();
        assert_eq!(cfg.lr, 3e-4);
        assert_eq!(parse_config_str(&cfg.serialize()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_line() {
        let err = parse_config_str("# header\n\nfoo.bar = 1\n").unwrap_err();
        assert!(matches!(err, HarnessError::Config { line: 3, .. }), "{err}");
        let err = parse_config_str("steps = many").unwrap_err();
        assert!(matches!(err, HarnessError::Config { line: 1, .. }));
        let err = parse_config_str("steps 10").unwrap_err();
        assert!(matches!(err, HarnessError::Config { line: 1, .. }));
    }

    #[test]
    fn out_of_range_values() {
        for text in [
            "mask.beta = 1.5",
            "mask.beta = 0",
            "mask.alpha = 0",
            "lr = 0",
            "ema_decay = 1",
            "ema_decay = -0.1",
            "batch = 0",
            "T = 0",
            "sample_steps = 2000",
            "sample_clip = -1",
            "ema_warmup = maybe",
            "model.width = 0",
            "model.routing = dit_style",
            "mask.strategy = full\nmask.beta = 0.5",
        ] {
            assert!(parse_config_str(text).is_err(), "{text}");
        }
    }
}
