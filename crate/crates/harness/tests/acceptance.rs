//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{run_cli, tiny_config};
use dtr_core::analysis::{cka_timestep_matrix, linear_cka, probe_timesteps};
use dtr_core::denoiser::gradcheck::{check, Problem};
use dtr_core::denoiser::{
    build_denoiser, jitter_params, mask_rows, BlockKind, BlockSlots, DenoiserConfig, DenseSlots,
    DitSlots, RoutingVariant, LN_EPS,
};
use dtr_core::diffusion::standard_normal;
use dtr_core::masks::{self, expected_shared_channels, overlap_matrix, MaskSpec};
use dtr_core::params::ParamSet;
use dtr_core::schedule::cosine_schedule;
use dtr_harness::compare::{compare_experiment, Variant};
use dtr_harness::config::RunConfig;
use dtr_harness::data::{gen_dataset, Dataset};
use dtr_harness::run::load_model;
use dtr_harness::seeds;
use dtr_harness::train::{train, CHECKPOINT_FILE};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn within(started: Instant, limit: Duration) -> Outcome {
    let took = started.elapsed();
    ensure!(took < limit, "took {:.2?}, limit {:.0?}", took, limit);
    Ok(format!("{took:.2?}"))
}

fn parse_mask_csv(text: &str) -> Vec<Vec<u8>> {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn mask_exactness() -> Outcome {
    let started = Instant::now();
    let dir = scratch("masks");
    let tables = [
        ("1", "4,5,dtr,1,0.6,0\n1,1,1,0,0\n0,1,1,1,0\n0,1,1,1,0\n0,0,1,1,1\n"),
        ("4", "4,5,dtr,4,0.6,0\n1,1,1,0,0\n1,1,1,0,0\n1,1,1,0,0\n0,0,1,1,1\n"),
    ];
    for (alpha, want) in tables {
        let path = dir.join(format!("alpha{alpha}.csv"));
        let p = path.to_str().unwrap();
        let (code, _, err) = run_cli(&[
            "mask", "gen", "--T", "4", "--C", "5", "--beta", "0.6", "--alpha", alpha, "--strategy", "dtr", "--out", p,
        ]);
        ensure!(code == 0, "mask gen failed: {err}");
        let got = fs::read_to_string(&path).unwrap();
        ensure!(got == want, "alpha={alpha}: got\n{got}");
    }
    let path = dir.join("large.csv");
    let (code, _, err) = run_cli(&[
        "mask", "gen", "--T", "1000", "--C", "64", "--beta", "0.8", "--alpha", "4", "--out", path.to_str().unwrap(),
    ]);
    ensure!(code == 0, "mask gen failed: {err}");
    let rows = parse_mask_csv(&fs::read_to_string(&path).unwrap());
    ensure!(rows.len() == 1000, "{} rows", rows.len());
    let mut offsets = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let sum: usize = row.iter().map(|&b| b as usize).sum();
        ensure!(sum == 51, "row {i} sums to {sum}");
        offsets.push(row.iter().position(|&b| b == 1).unwrap());
    }
    ensure!(offsets.windows(2).all(|w| w[0] <= w[1]), "offsets not monotone");
    ensure!(offsets[0] == 0 && offsets[999] == 13, "offsets {} .. {}", offsets[0], offsets[999]);
    let took = within(started, Duration::from_secs(1))?;
    Ok(format!("tables exact, 1000x64 bank rows=51, offsets 0..13 ({took})"))
}

fn shared_channel_oracle() -> Outcome {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for c in 1..=64usize {
        for active in 1..=c {
            let got = expected_shared_channels(c, active).map_err(|e| e.to_string())?;
            worst = worst.max((got - (active * active) as f64 / c as f64).abs());
        }
    }
    ensure!(worst <= 1e-12, "max deviation {worst:e}");
    let var = 4.0 * 4.0 * 4.0 * 4.0 / (64.0 * 7.0);
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let bank = MaskSpec::random(2000, 8, 0.5, seed).build().map_err(|e| e.to_string())?;
        let overlap = overlap_matrix(&bank);
        let mut total = 0usize;
        let mut pairs = 0usize;
        for i in 0..2000 {
            for j in i + 1..2000 {
                total += overlap[i][j];
                pairs += 1;
            }
        }
        let mean = total as f64 / pairs as f64;
        let z = (mean - 2.0) / (var / pairs as f64).sqrt();
        ensure!(z.abs() < 3.0, "seed {seed}: mean {mean} is {z:.2} SE from 2");
        lines.push(format!("{mean:.4} ({z:+.2} SE)"));
    }
    let took = within(started, Duration::from_secs(10))?;
    Ok(format!("exact max dev {worst:.1e}; random means {} ({took})", lines.join(", ")))
}

fn affinity_monotonicity() -> Outcome {
    let started = Instant::now();
    let mut banks = 0;
    for t in 1..=64usize {
        for c in 1..=64usize {
            for alpha in [0.5, 1.0, 2.0, 4.0] {
                for beta in [0.5, 0.8] {
                    if (beta * c as f64).floor() < 1.0 {
                        continue;
                    }
                    let bank = MaskSpec::dtr(t, c, alpha, beta).build().map_err(|e| e.to_string())?;
                    let o = overlap_matrix(&bank);
                    for i in 0..t {
                        for j in i + 1..t {
                            ensure!(o[i][j] <= o[i][j - 1], "T={t} C={c} a={alpha} b={beta} i={i} j={j}");
                        }
                        for j in (0..i).rev() {
                            ensure!(o[i][j] <= o[i][j + 1], "T={t} C={c} a={alpha} b={beta} i={i} j={j}");
                        }
                    }
                    banks += 1;
                }
            }
        }
    }
    let took = within(started, Duration::from_secs(5))?;
    Ok(format!("{banks} banks (T, C <= 64) ({took})"))
}

fn layer_norm_ref(v: &[f64]) -> Vec<f64> {
    let c = v.len() as f64;
    let mean = v.iter().sum::<f64>() / c;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
    v.iter().map(|x| (x - mean) / (var + LN_EPS).sqrt()).collect()
}

fn dense_ref(p: &ParamSet, slots: DenseSlots, x: &[f64]) -> Vec<f64> {
    let w = &p.tensors()[slots.w];
    let b = &p.tensors()[slots.b].data;
    let (rows, cols) = (w.shape[0], w.shape[1]);
    (0..cols)
        .map(|j| b[j] + (0..rows).map(|i| x[i] * w.data[i * cols + j]).sum::<f64>())
        .collect()
}

/// `(1 - m) z + Inner(m z)` written out term by term for one sample.
fn dit_block_ref(p: &ParamSet, s: DitSlots, z: &[f64], cond: &[f64], m: &[f64]) -> Vec<f64> {
    let c = z.len();
    let md = dense_ref(p, s.modulation, cond);
    let part = |k: usize| &md[k * c..(k + 1) * c];
    let u: Vec<f64> = z.iter().zip(m).map(|(a, b)| a * b).collect();
    let n1 = layer_norm_ref(&u);
    let h1: Vec<f64> = (0..c).map(|j| n1[j] * (1.0 + part(1)[j]) + part(0)[j]).collect();
    let mix = dense_ref(p, s.mix, &h1);
    let mid: Vec<f64> = (0..c).map(|j| u[j] + part(2)[j] * mix[j]).collect();
    let n2 = layer_norm_ref(&mid);
    let h2: Vec<f64> = (0..c).map(|j| n2[j] * (1.0 + part(4)[j]) + part(3)[j]).collect();
    let hidden: Vec<f64> = dense_ref(p, s.mlp_in, &h2)
        .into_iter()
        .map(|v| v / (1.0 + (-v).exp()))
        .collect();
    let mlp = dense_ref(p, s.mlp_out, &hidden);
    (0..c).map(|j| mid[j] + part(5)[j] * mlp[j] + (1.0 - m[j]) * z[j]).collect()
}

fn random_bank(rng: &mut ChaCha8Rng, tasks: usize, width: usize) -> masks::MaskBank {
    let beta = rng.random_range(0.2..=1.0);
    let spec = if (beta * width as f64).floor() < 1.0 {
        MaskSpec::full(tasks, width)
    } else if rng.random::<bool>() {
        MaskSpec::dtr(tasks, width, rng.random_range(0.5..5.0), beta)
    } else {
        MaskSpec::random(tasks, width, beta, rng.random())
    };
    spec.build().unwrap()
}

fn routing_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_full: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    let mut worst_identity: f64 = 0.0;
    for kind in [BlockKind::Adm, BlockKind::Dit] {
        let mut routed = build_denoiser(DenoiserConfig::routed(2, 32, 3, kind), 1).unwrap();
        let init_eps;
        {
            let bank = MaskSpec::dtr(100, 32, 4.0, 0.8).build().unwrap();
            let x = standard_normal(&mut rng, 16, 2);
            let ts: Vec<usize> = (0..16).map(|_| rng.random_range(1..=100)).collect();
            init_eps = routed.forward(x.view(), &ts, &bank).unwrap();
            let z = standard_normal(&mut rng, 16, 32);
            let cond = routed.conditioning(&ts);
            let m = mask_rows(&bank, &ts).unwrap();
            for l in 0..3 {
                let out = routed.apply_block(l, z.view(), cond.view(), Some(m.view())).unwrap();
                for (a, b) in out.iter().zip(&z) {
                    worst_identity = worst_identity.max((a - b).abs());
                }
            }
        }
        worst_identity = worst_identity.max(init_eps.iter().fold(0.0, |acc: f64, v| acc.max(v.abs())));
        jitter_params(routed.params_mut(), 0.3, 7);
        let plain = dtr_core::denoiser::Denoiser::from_params(
            routed.config().with_routing(RoutingVariant::None),
            routed.params().clone(),
        )
        .unwrap();
        let full = MaskSpec::full(100, 32).build().unwrap();
        let x = standard_normal(&mut rng, 32, 2);
        let ts: Vec<usize> = (0..32).map(|_| rng.random_range(1..=100)).collect();
        let a = routed.forward(x.view(), &ts, &full).unwrap();
        let b = plain.forward(x.view(), &ts, &full).unwrap();
        for (u, v) in a.iter().zip(&b) {
            worst_full = worst_full.max((u - v).abs());
        }
    }
    ensure!(worst_identity <= 1e-15, "identity at init deviates by {worst_identity:e}");
    ensure!(worst_full <= 1e-15, "full mask deviates by {worst_full:e}");
    for instance in 0..100u64 {
        let width = rng.random_range(2..=16);
        let batch = rng.random_range(1..=4);
        let tasks = rng.random_range(1..=50);
        let mut model = build_denoiser(DenoiserConfig::routed(2, width, 1, BlockKind::Dit), instance).unwrap();
        jitter_params(model.params_mut(), 0.5, instance + 1000);
        let bank = random_bank(&mut rng, tasks, width);
        let ts: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=tasks)).collect();
        let z = standard_normal(&mut rng, batch, width) * 2.0;
        let cond = model.conditioning(&ts);
        let m = mask_rows(&bank, &ts).unwrap();
        let BlockSlots::Dit(slots) = model.slots().blocks[0] else {
            return Err("expected a DiT block".into());
        };
        let out = model.apply_block(0, z.view(), cond.view(), Some(m.view())).unwrap();
        for i in 0..batch {
            let want = dit_block_ref(
                model.params(),
                slots,
                &z.row(i).to_vec(),
                &cond.row(i).to_vec(),
                &m.row(i).to_vec(),
            );
            for (a, b) in out.row(i).iter().zip(&want) {
                worst_oracle = worst_oracle.max((a - b).abs());
            }
        }
    }
    ensure!(worst_oracle <= 1e-12, "DiT block deviates from the expansion by {worst_oracle:e}");
    Ok(format!(
        "full-mask dev {worst_full:.1e}, 100 DiT instances dev {worst_oracle:.1e}, identity dev {worst_identity:.1e}"
    ))
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let mut errors = Vec::new();
    for (routing, kind) in [
        (RoutingVariant::None, BlockKind::Adm),
        (RoutingVariant::AdmStyle, BlockKind::Adm),
        (RoutingVariant::DitStyle, BlockKind::Dit),
    ] {
        let report = check(&Problem::new(8, 2, routing, kind, 11).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        ensure!(report.max_rel_error < 1e-6, "{routing}: {report:?}");
        errors.push(format!("{routing} {:.1e}", report.max_rel_error));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for draw in 0..20u64 {
        let kind = if draw % 2 == 0 { BlockKind::Adm } else { BlockKind::Dit };
        let mut problem = Problem::new(8, 2, kind.routed_variant(), kind, draw).map_err(|e| e.to_string())?;
        problem.bank = random_bank(&mut rng, 10, 8);
        let t = rng.random_range(1..=10);
        problem.timesteps = vec![t; problem.timesteps.len()];
        let row = problem.bank.row(t - 1).to_vec();
        match kind {
            BlockKind::Adm => {
                let (_, grads) = problem
                    .model
                    .backward(problem.x_t.view(), &problem.timesteps, problem.eps.view(), &problem.bank, &problem.weights)
                    .map_err(|e| e.to_string())?;
                for l in 0..2 {
                    let g = grads.get(&format!("blocks.{l}.fc1.w")).unwrap();
                    for (ch, &on) in row.iter().enumerate() {
                        if on == 0 {
                            ensure!(
                                g.data[ch * 8..(ch + 1) * 8].iter().all(|&v| v == 0.0),
                                "draw {draw}: block {l} channel {ch} has gradient"
                            );
                        }
                    }
                }
            }
            BlockKind::Dit => {
                let z = standard_normal(&mut rng, 6, 8);
                let d_out = standard_normal(&mut rng, 6, 8);
                let cond = problem.model.conditioning(&problem.timesteps);
                let m = mask_rows(&problem.bank, &problem.timesteps).unwrap();
                let (dz, _) = problem
                    .model
                    .block_vjp(0, z.view(), cond.view(), Some(m.view()), d_out.view())
                    .map_err(|e| e.to_string())?;
                for ((&g, &up), &mv) in dz.iter().zip(&d_out).zip(&m) {
                    if mv == 0.0 {
                        ensure!(g - up == 0.0, "draw {draw}: inner path leaks {:e}", g - up);
                    }
                }
            }
        }
    }
    let took = within(started, Duration::from_secs(30))?;
    Ok(format!("max rel error {}; 20 isolation draws exact ({took})", errors.join(", ")))
}

fn zero_overhead() -> Outcome {
    let base = RunConfig::default();
    let mut counts = Vec::new();
    for kind in [BlockKind::Adm, BlockKind::Dit] {
        let mut cfg = base.clone();
        cfg.model.block = kind;
        cfg.model.routing = kind.routed_variant();
        let per: Vec<usize> = Variant::ALL
            .iter()
            .map(|v| {
                let c = v.apply(&cfg);
                build_denoiser(c.denoiser_config(), 0).unwrap().parameter_count()
            })
            .collect();
        ensure!(per.iter().all(|&p| p == per[0]), "{kind}: counts {per:?}");
        counts.push(format!("{kind} {}", per[0]));
    }
    let mut ratios = Vec::new();
    for kind in [BlockKind::Adm, BlockKind::Dit] {
        let routed = build_denoiser(DenoiserConfig::routed(2, 64, 4, kind), 0).unwrap();
        let plain = build_denoiser(DenoiserConfig::routed(2, 64, 4, kind).with_routing(RoutingVariant::None), 0).unwrap();
        let bank = MaskSpec::dtr(1000, 64, 4.0, 0.8).build().unwrap();
        let x = standard_normal(&mut ChaCha8Rng::seed_from_u64(1), 128, 2);
        let ts: Vec<usize> = (0..128).map(|i| 1 + (i * 997) % 1000).collect();
        let (_, with) = routed.forward_counted(x.view(), &ts, &bank).unwrap();
        let (_, without) = plain.forward_counted(x.view(), &ts, &bank).unwrap();
        let ratio = (with.total() - without.total()) as f64 / without.total() as f64;
        ensure!(ratio < 0.01, "{kind}: overhead {ratio:.4}");
        ratios.push(format!("{kind} {:.3}%", 100.0 * ratio));
    }
    Ok(format!("params {}; op overhead {}", counts.join(", "), ratios.join(", ")))
}

const DIRECTIONAL_THRESHOLD: f64 = 1.10;

fn training_smoke(compare_dir: &PathBuf) -> Outcome {
    let cfg = RunConfig::default();
    let summary = compare_experiment(&cfg, &Variant::ALL, &[0, 1, 2, 3, 4], Some(compare_dir)).map_err(|e| e.to_string())?;
    let mut slow = Vec::new();
    let mut weak = Vec::new();
    for r in &summary.runs {
        if r.train_ms > 180_000 {
            slow.push(format!("{}/{} {} ms", r.variant, r.seed, r.train_ms));
        }
        if r.final_loss > 0.5 * r.initial_loss {
            weak.push(format!("{}/{} {:.3}->{:.3}", r.variant, r.seed, r.initial_loss, r.final_loss));
        }
    }
    let med = |name: &str| summary.variant(name).unwrap().median_swd;
    let (none, random, dtr) = (med("none"), med("random"), med("dtr"));
    let slowest = summary.runs.iter().map(|r| r.train_ms).max().unwrap_or(0);
    let ordering = if dtr < none && none < random { "holds" } else { "does not hold" };
    let detail = format!(
        "median SWD none {none:.4}, random {random:.4}, dtr {dtr:.4}; dtr/none {:.3} (gate {DIRECTIONAL_THRESHOLD}); \
         dtr < none < random {ordering}; slowest training {:.1} s",
        dtr / none,
        slowest as f64 / 1000.0
    );
    ensure!(slow.is_empty(), "runs over 3 minutes: {}; {detail}", slow.join(", "));
    ensure!(weak.is_empty(), "loss dropped by less than half: {}; {detail}", weak.join(", "));
    ensure!(dtr <= DIRECTIONAL_THRESHOLD * none, "{detail}");
    Ok(detail)
}

fn cka_suite(compare_dir: &PathBuf) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = ndarray::array![[1.0, 2.0], [3.0, -1.0], [0.0, 4.0], [-2.0, 1.0]];
    let y = ndarray::array![[0.5, 1.0, -1.0], [2.0, 0.0, 1.0], [-1.0, 3.0, 0.25], [1.0, 1.0, 1.0]];
    let reference = 0.729_511_045_691_901_127_595_928_353_298;
    let got = linear_cka(x.view(), y.view()).unwrap();
    ensure!((got - reference).abs() < 1e-10, "reference pair gives {got}");
    for trial in 0..50 {
        let n = rng.random_range(3..40);
        let p = rng.random_range(1..8);
        let a = standard_normal(&mut rng, n, p);
        let q = rng.random_range(1..8);
        let b = standard_normal(&mut rng, n, q);
        let base = linear_cka(a.view(), b.view()).unwrap();
        ensure!((linear_cka(a.view(), a.view()).unwrap() - 1.0).abs() < 1e-9, "trial {trial}: self");
        let scaled = &a * rng.random_range(0.01..100.0);
        ensure!((linear_cka(scaled.view(), b.view()).unwrap() - base).abs() < 1e-9, "trial {trial}: scale");
        let v = standard_normal(&mut rng, 1, p);
        let norm2 = v.iter().map(|t| t * t).sum::<f64>();
        let h = Array2::from_shape_fn((p, p), |(i, j)| (i == j) as u8 as f64 - 2.0 * v[[0, i]] * v[[0, j]] / norm2);
        let rotated = a.dot(&h);
        ensure!((linear_cka(rotated.view(), b.view()).unwrap() - base).abs() < 1e-9, "trial {trial}: rotation");
    }
    let mut model = build_denoiser(DenoiserConfig::routed(2, 16, 2, BlockKind::Adm), 3).unwrap();
    jitter_params(model.params_mut(), 0.3, 4);
    let bank = MaskSpec::dtr(200, 16, 4.0, 0.8).build().unwrap();
    let schedule = cosine_schedule(200).unwrap();
    let x0 = gen_dataset(Dataset::Gauss8, 128, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let grid = probe_timesteps(200, 16);
    let m = cka_timestep_matrix(&model, &bank, &schedule, x0.view(), &grid, 1, 6).map_err(|e| e.to_string())?;
    for a in 0..grid.len() {
        ensure!((m.values[[a, a]] - 1.0).abs() < 1e-9, "diagonal {a}");
        for b in 0..grid.len() {
            ensure!((m.values[[a, b]] - m.values[[b, a]]).abs() < 1e-9, "asymmetric at {a},{b}");
        }
    }

    let mut diagnostics = Vec::new();
    let out_dir = scratch("cka");
    for arm in ["dtr", "none"] {
        let ckpt = compare_dir.join(format!("{arm}_seed0")).join(CHECKPOINT_FILE);
        if !ckpt.exists() {
            diagnostics.push(format!("{arm}: no trained checkpoint"));
            continue;
        }
        let (model, bank, _) = load_model(&ckpt, false).map_err(|e| e.to_string())?;
        let schedule = cosine_schedule(bank.tasks()).unwrap();
        let x0 = gen_dataset(Dataset::Gauss8, 512, &mut seeds::stream(0, seeds::PROBE)).unwrap();
        let grid = probe_timesteps(bank.tasks(), 16);
        let mut bands = Vec::new();
        for block in 0..model.config().n_blocks {
            let m = cka_timestep_matrix(&model, &bank, &schedule, x0.view(), &grid, block, 0).map_err(|e| e.to_string())?;
            m.write_csv(out_dir.join(format!("{arm}_block{block}.csv"))).map_err(|e| e.to_string())?;
            let (near, far) = m.band_means();
            bands.push(format!("{near:.3}/{far:.3}"));
        }
        diagnostics.push(format!("{arm} adjacent/farthest {}", bands.join(" ")));
    }
    Ok(format!(
        "reference dev {:.1e}, invariances within 1e-9, matrix symmetric with unit diagonal; diagnostic: {}",
        (got - reference).abs(),
        diagnostics.join("; ")
    ))
}

fn determinism() -> Outcome {
    let cfg = tiny_config();
    let a = scratch("det_a");
    let b = scratch("det_b");
    train(&cfg, Some(&a)).map_err(|e| e.to_string())?;
    train(&cfg, Some(&b)).map_err(|e| e.to_string())?;
    let ca = fs::read(a.join(CHECKPOINT_FILE)).unwrap();
    ensure!(ca == fs::read(b.join(CHECKPOINT_FILE)).unwrap(), "checkpoints differ");
    for dir in [&a, &b] {
        let (code, _, err) = run_cli(&[
            "sample",
            "--checkpoint",
            dir.join(CHECKPOINT_FILE).to_str().unwrap(),
            "--n",
            "200",
            "--steps",
            "10",
            "--seed",
            "4",
            "--out",
            dir.join("samples.csv").to_str().unwrap(),
        ]);
        ensure!(code == 0, "sample failed: {err}");
    }
    ensure!(
        fs::read(a.join("samples.csv")).unwrap() == fs::read(b.join("samples.csv")).unwrap(),
        "sample files differ"
    );
    for dir in [&a, &b] {
        compare_experiment(&cfg, &Variant::ALL, &[0, 1, 2], Some(&dir.join("compare"))).map_err(|e| e.to_string())?;
    }
    for file in ["summary.csv", "summary.json"] {
        ensure!(
            fs::read(a.join("compare").join(file)).unwrap() == fs::read(b.join("compare").join(file)).unwrap(),
            "{file} differs"
        );
    }
    ensure!(
        fs::read(a.join("compare/dtr_seed2").join(CHECKPOINT_FILE)).unwrap()
            == fs::read(b.join("compare/dtr_seed2").join(CHECKPOINT_FILE)).unwrap(),
        "compare checkpoints differ"
    );
    Ok(format!("checkpoint ({} bytes), samples and compare summaries byte-identical", ca.len()))
}

fn main() {
    let compare_dir = scratch("compare");
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome>)> = vec![
        ("mask exactness", Box::new(mask_exactness)),
        ("shared-channel oracle", Box::new(shared_channel_oracle)),
        ("affinity monotonicity", Box::new(affinity_monotonicity)),
        ("routing algebra", Box::new(routing_algebra)),
        ("gradient suite", Box::new(gradient_suite)),
        ("zero overhead", Box::new(zero_overhead)),
        ("training smoke + directional check", Box::new({
            let d = compare_dir.clone();
            move || training_smoke(&d)
        })),
        ("CKA suite", Box::new({
            let d = compare_dir.clone();
            move || cka_suite(&d)
        })),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} PASS [{name}] {detail} [{secs:.1} s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL [{name}] {detail} [{secs:.1} s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
