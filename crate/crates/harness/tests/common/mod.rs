#![allow(dead_code)]

use dtr_harness::config::RunConfig;

/// Small configuration that trains in well under a second.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("n_train", "256"),
        ("T", "50"),
        ("steps", "40"),
        ("batch", "16"),
        ("lr", "0.001"),
        ("sample_steps", "10"),
        ("log_every", "10"),
        ("model.width", "8"),
        ("model.blocks", "2"),
        ("model.temb_dim", "8"),
        ("eval.samples", "64"),
        ("eval.reference", "128"),
        ("eval.projections", "16"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

pub fn run_cli(args: &[&str]) -> (i32, String, String) {
    let argv: Vec<String> = std::iter::once("dtr").chain(args.iter().copied()).map(String::from).collect();
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = dtr_harness::cli::run(&argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}
