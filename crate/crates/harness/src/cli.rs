//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use dtr_core::analysis::{cka_timestep_matrix, overlap_heatmap_export, probe_timesteps};
use dtr_core::denoiser::gradcheck::{check, Problem};
use dtr_core::denoiser::{BlockKind, RoutingVariant};
use dtr_core::diffusion::SamplerOptions;
use dtr_core::masks::{self, MaskBank, MaskSpec, Strategy};
use dtr_core::schedule::cosine_schedule;

use crate::compare::{compare_experiment, Variant};
use crate::config::{parse_config, RunConfig};
use crate::data::{gen_dataset, Dataset};
use crate::error::{HarnessError, Result};
use crate::run::{generate, load_model, read_points, score, write_points};
use crate::seeds;
use crate::train::train;

#[derive(Parser, Debug)]
#[command(name = "dtr", about = "Timestep-routed diffusion on toy data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build, export and inspect routing masks.
    #[command(subcommand)]
    Mask(MaskCommand),
    /// Train one run from a config file.
    Train(TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Sliced Wasserstein distance of a sample file against a reference.
    Eval(EvalArgs),
    /// Cross-timestep CKA of one block of a checkpoint.
    Cka(CkaArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Train and score none / random / dtr arms over several seeds.
    Compare(CompareArgs),
}

#[derive(Subcommand, Debug)]
enum MaskCommand {
    /// Write a mask bank as CSV (and optionally PGM).
    Gen(MaskArgs),
    /// Print window and overlap statistics of a mask bank.
    Stats(MaskStatsArgs),
}

#[derive(Args, Debug)]
struct MaskSpecArgs {
    #[arg(long = "T", default_value_t = 1000)]
    tasks: usize,
    #[arg(long = "C", default_value_t = 64)]
    channels: usize,
    #[arg(long, default_value_t = 0.8)]
    beta: f64,
    #[arg(long, default_value_t = 4.0)]
    alpha: f64,
    #[arg(long, default_value = "dtr")]
    strategy: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl MaskSpecArgs {
    fn spec(&self) -> Result<MaskSpec> {
        Ok(MaskSpec {
            strategy: self.strategy.parse::<Strategy>()?,
            tasks: self.tasks,
            channels: self.channels,
            alpha: self.alpha,
            beta: self.beta,
            seed: self.seed,
        })
    }
}

#[derive(Args, Debug)]
struct MaskArgs {
    #[command(flatten)]
    spec: MaskSpecArgs,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MaskStatsArgs {
    #[command(flatten)]
    spec: MaskSpecArgs,
    /// Read the bank from a CSV file instead of building it.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    overlap_pgm: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Override a config key, e.g. `--set steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 250)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Use the raw parameters instead of the EMA weights.
    #[arg(long)]
    raw: bool,
    /// Clamp of the clean estimate during sampling; 0 disables it.
    #[arg(long, default_value_t = 3.0)]
    clip: f64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    samples: PathBuf,
    /// Reference file; defaults to fresh draws of the configured dataset.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct CkaArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    block: usize,
    /// Number of probed timesteps.
    #[arg(long, default_value_t = 16)]
    k: usize,
    #[arg(long, default_value_t = 512)]
    batch: usize,
    #[arg(long, default_value = "gauss8")]
    dataset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    raw: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value = "adm_style")]
    variant: String,
    /// Block architecture; inferred from a routed variant.
    #[arg(long)]
    block: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "none,random,dtr")]
    variants: Vec<String>,
    #[arg(long, default_value = "compare")]
    out: PathBuf,
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    for (i, item) in overrides.iter().enumerate() {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| HarnessError::invalid(format!("--set expects KEY=VALUE, got {item:?}")))?;
        cfg.set(k.trim(), v.trim())
            .map_err(|m| HarnessError::invalid(format!("--set #{}: {m}", i + 1)))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn core_io(path: &Path) -> impl Fn(dtr_core::Error) -> HarnessError + '_ {
    move |e| match e {
        dtr_core::Error::Io(io) => HarnessError::io(path, io),
        other => other.into(),
    }
}

fn mask_stats(bank: &MaskBank, out: &mut dyn Write) -> std::io::Result<()> {
    let spec = bank.spec();
    let t = bank.tasks();
    writeln!(out, "strategy: {}", spec.strategy)?;
    writeln!(out, "tasks: {t}, channels: {}, active: {}", bank.channels(), bank.active_channels())?;
    if let Some(offsets) = bank.window_offsets() {
        let zero = offsets.iter().filter(|&&o| o == 0).count();
        writeln!(
            out,
            "offsets: first {}, last {}, rows at offset 0: {zero}",
            offsets[0],
            offsets[t - 1]
        )?;
    }
    let overlap = masks::overlap_matrix(bank);
    if t > 1 {
        let adjacent: f64 = (0..t - 1).map(|i| overlap[i][i + 1] as f64).sum::<f64>() / (t - 1) as f64;
        writeln!(out, "shared channels: adjacent mean {adjacent:.4}, first/last {}", overlap[0][t - 1])?;
    }
    if let Ok(e) = masks::expected_shared_channels(bank.channels(), bank.active_channels()) {
        writeln!(out, "random-routing expectation: {e:.4}")?;
    }
    Ok(())
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let w = |e: std::io::Error| HarnessError::io("<stdout>", e);
    match cli.command {
        Command::Mask(MaskCommand::Gen(args)) => {
            let bank = args.spec.spec()?.build()?;
            match &args.out {
                Some(p) => masks::write_csv(&bank, p).map_err(core_io(p))?,
                None => out.write_all(masks::to_csv_string(&bank).as_bytes()).map_err(w)?,
            }
            if let Some(p) = &args.pgm {
                masks::write_mask_pgm(&bank, p).map_err(core_io(p))?;
            }
        }
        Command::Mask(MaskCommand::Stats(args)) => {
            let bank = match &args.input {
                Some(p) => masks::read_csv(p).map_err(core_io(p))?,
                None => args.spec.spec()?.build()?,
            };
            mask_stats(&bank, out).map_err(w)?;
            if let Some(p) = &args.overlap_pgm {
                overlap_heatmap_export(&bank, p).map_err(core_io(p))?;
            }
        }
        Command::Train(args) => {
            let cfg = load_config(args.config.as_deref(), &args.overrides)?;
            let result = train(&cfg, Some(&args.out))?;
            writeln!(
                out,
                "trained {} steps: loss {:.5} -> {:.5}",
                cfg.steps,
                result.initial_loss(),
                result.final_loss()
            )
            .map_err(w)?;
        }
        Command::Sample(args) => {
            let (model, bank, _) = load_model(&args.checkpoint, args.raw)?;
            let options = SamplerOptions {
                clip_x0: (args.clip > 0.0).then_some(args.clip),
            };
            let points = generate(&model, &bank, args.steps, args.n, args.seed, options)?;
            write_points(&args.out, &points)?;
        }
        Command::Eval(args) => {
            let cfg = load_config(args.config.as_deref(), &args.overrides)?;
            let samples = read_points(&args.samples)?;
            let swd = match &args.reference {
                Some(p) => crate::swd::evaluate_swd(
                    samples.view(),
                    read_points(p)?.view(),
                    cfg.eval.projections,
                    seeds::stream_seed(cfg.seed, seeds::PROJECTIONS),
                )?,
                None => score(&cfg, &samples)?,
            };
            writeln!(out, "swd {swd}").map_err(w)?;
        }
        Command::Cka(args) => {
            let (model, bank, _) = load_model(&args.checkpoint, args.raw)?;
            let dataset: Dataset = args.dataset.parse()?;
            let x0 = gen_dataset(dataset, args.batch, &mut seeds::stream(args.seed, seeds::PROBE))?;
            let schedule = cosine_schedule(bank.tasks())?;
            let grid = probe_timesteps(bank.tasks(), args.k);
            let m = cka_timestep_matrix(&model, &bank, &schedule, x0.view(), &grid, args.block, args.seed)?;
            match &args.out {
                Some(p) => m.write_csv(p).map_err(core_io(p))?,
                None => out.write_all(m.to_csv().as_bytes()).map_err(w)?,
            }
        }
        Command::Gradcheck(args) => {
            let routing: RoutingVariant = args.variant.parse()?;
            let block = match (&args.block, routing) {
                (Some(b), _) => b.parse()?,
                (None, RoutingVariant::DitStyle) => BlockKind::Dit,
                (None, _) => BlockKind::Adm,
            };
            let problem = Problem::new(args.width, args.blocks, routing, block, args.seed)?;
            let report = check(&problem)?;
            writeln!(
                out,
                "max relative error {:.3e} over {} parameters (worst {}[{}])",
                report.max_rel_error, report.checked, report.worst.0, report.worst.1
            )
            .map_err(w)?;
            if !(report.max_rel_error < args.tolerance) {
                return Err(HarnessError::invalid(format!(
                    "gradient check failed: {:.3e} >= {:.1e}",
                    report.max_rel_error, args.tolerance
                )));
            }
        }
        Command::Compare(args) => {
            let cfg = load_config(args.config.as_deref(), &args.overrides)?;
            let variants = args
                .variants
                .iter()
                .map(|v| v.parse())
                .collect::<Result<Vec<Variant>>>()?;
            let summary = compare_experiment(&cfg, &variants, &args.seeds, Some(&args.out))?;
            for v in &summary.variants {
                writeln!(
                    out,
                    "{:<8} median swd {:.5}  params {}  loss {:.4} -> {:.4}",
                    v.variant, v.median_swd, v.params, v.median_initial_loss, v.median_final_loss
                )
                .map_err(w)?;
            }
        }
    }
    Ok(())
}

/// Runs the CLI on `argv` (program name first) and returns the exit code:
/// 0 on success, 1 on usage or validation errors, 2 on I/O errors.
pub fn run(argv: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
