//! Baseline / random routing / DTR comparison across seeds.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use dtr_core::denoiser::RoutingVariant;
use dtr_core::masks::Strategy;

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::run::{generate, score, write_points};
use crate::seeds;
use crate::train::train;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Unrouted network.
    None,
    /// Independent random channel subsets per timestep.
    Random,
    /// Sliding-window routing.
    Dtr,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::None, Variant::Random, Variant::Dtr];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::Random => "random",
            Variant::Dtr => "dtr",
        }
    }

    /// `base` with the routing and mask strategy of this arm.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        match self {
            Variant::None => cfg.model.routing = RoutingVariant::None,
            Variant::Random => {
                cfg.model.routing = cfg.model.block.routed_variant();
                cfg.mask.strategy = Strategy::Random;
            }
            Variant::Dtr => {
                cfg.model.routing = cfg.model.block.routed_variant();
                cfg.mask.strategy = Strategy::Dtr;
            }
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Variant::None),
            "random" => Ok(Variant::Random),
            "dtr" => Ok(Variant::Dtr),
            other => Err(HarnessError::invalid(format!(
                "unknown variant {other:?} (expected none, random or dtr)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub swd: f64,
    pub params: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: String,
    pub median_swd: f64,
    pub params: usize,
    pub median_initial_loss: f64,
    pub median_final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantSummary>,
    #[serde(skip)]
    pub runs: Vec<RunResult>,
}

impl Summary {
    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.variant == name)
    }

    /// `variant,seed,swd,params` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,swd,params\n");
        for r in &self.runs {
            let _ = writeln!(out, "{},{},{},{}", r.variant, r.seed, r.swd, r.params);
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains, samples (EMA weights) and scores one arm for one seed. With
/// `out_dir` set, the run's checkpoint, metrics and samples go to
/// `out_dir/<variant>_seed<seed>/`.
pub fn run_arm(base: &RunConfig, variant: Variant, seed: u64, out_dir: Option<&Path>) -> Result<RunResult> {
    let mut cfg = variant.apply(base);
    cfg.seed = seed;
    let dir = out_dir.map(|d| d.join(format!("{variant}_seed{seed}")));
    let out = train(&cfg, dir.as_deref())?;
    let ema = out.ema_model()?;
    let samples = generate(
        &ema,
        &out.bank,
        cfg.sample_steps,
        cfg.eval.samples,
        seeds::stream_seed(seed, seeds::SAMPLER),
        cfg.sampler_options(),
    )?;
    if let Some(d) = &dir {
        write_points(&d.join("samples.csv"), &samples)?;
    }
    let swd = score(&cfg, &samples)?;
    Ok(RunResult {
        variant: variant.to_string(),
        seed,
        swd,
        params: out.model.parameter_count(),
        initial_loss: out.initial_loss(),
        final_loss: out.final_loss(),
        train_ms: out.metrics.last().map_or(0, |m| m.wallclock_ms),
    })
}

pub fn summarize(seeds: &[u64], variants: &[Variant], runs: Vec<RunResult>) -> Summary {
    let per = variants
        .iter()
        .map(|v| {
            let mine: Vec<&RunResult> = runs.iter().filter(|r| r.variant == v.as_str()).collect();
            let pick = |f: fn(&RunResult) -> f64| median(&mine.iter().map(|r| f(r)).collect::<Vec<_>>());
            VariantSummary {
                variant: v.to_string(),
                median_swd: pick(|r| r.swd),
                params: mine.first().map_or(0, |r| r.params),
                median_initial_loss: pick(|r| r.initial_loss),
                median_final_loss: pick(|r| r.final_loss),
            }
        })
        .collect();
    Summary {
        seeds: seeds.to_vec(),
        variants: per,
        runs,
    }
}

/// Runs every (variant, seed) pair and writes `summary.csv` and
/// `summary.json` to `out_dir` when given.
pub fn compare_experiment(
    base: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<Summary> {
    base.validate()?;
    if seeds.len() < 3 {
        return Err(HarnessError::invalid("compare needs at least 3 seeds"));
    }
    if variants.is_empty() {
        return Err(HarnessError::invalid("compare needs at least one variant"));
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| HarnessError::io(d, e))?;
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        for &v in variants {
            runs.push(run_arm(base, v, seed, out_dir)?);
        }
    }
    let summary = summarize(seeds, variants, runs);
    if let Some(d) = out_dir {
        let csv = d.join("summary.csv");
        fs::write(&csv, summary.to_csv()).map_err(|e| HarnessError::io(&csv, e))?;
        let json = d.join("summary.json");
        let mut text = serde_json::to_string_pretty(&summary)?;
        text.push('\n');
        fs::write(&json, text).map_err(|e| HarnessError::io(&json, e))?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn arms_share_everything_but_routing() {
        let base = RunConfig::default();
        let none = Variant::None.apply(&base);
        let dtr = Variant::Dtr.apply(&base);
        let random = Variant::Random.apply(&base);
        assert_eq!(none.model.routing, RoutingVariant::None);
        assert_eq!(dtr.model.routing, RoutingVariant::AdmStyle);
        assert_eq!(random.mask.strategy, Strategy::Random);
        assert_eq!((none.seed, none.mask.beta), (dtr.seed, dtr.mask.beta));
    }
}
