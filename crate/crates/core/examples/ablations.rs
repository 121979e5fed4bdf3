//! Runs every variant over a few seeds and prints the metric table; writes
//! JSON, CSV and reward curves to the output directory.
//!
//! cargo run --release --example ablations -- 2 /tmp/idmir-ablations

use std::sync::Arc;

use idmir::data::synthetic::bundled;
use idmir::env::{fit_ground_truth, FitConfig};
use idmir::eval::{format_table, run_suite, write_reports, EvalEnv};
use idmir::trainer::{TrainConfig, Variant};

fn main() -> idmir::Result<()> {
    let mut args = std::env::args().skip(1);
    let n_seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(2);
    let out = args.next().map(std::path::PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("idmir-ablations"));
    let ds = bundled();
    let env = EvalEnv { model: Arc::new(fit_ground_truth(&ds, &FitConfig::default())?), alpha: 0.9 };
    let cfg = TrainConfig::desk();
    let seeds: Vec<u64> = (1..=n_seeds).collect();
    let reports = run_suite(&Variant::ALL, &ds, &env, &cfg, cfg.horizon, &seeds, &[5, 20])?;
    print!("{}", format_table(&reports));
    write_reports(&reports, &out)?;
    println!("reports -> {}", out.display());
    Ok(())
}
