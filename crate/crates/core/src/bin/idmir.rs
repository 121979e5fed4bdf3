use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use idmir::data::synthetic::{generate, write_raw_csv, SyntheticSpec};
use idmir::data::{BuildOptions, LoggedDataset};
use idmir::env::{fit_ground_truth, FitConfig, MfModel};
use idmir::eval::{format_table, run_suite, write_reports, EvalEnv};
use idmir::ident::{run_bench, IdentConfig};
use idmir::trainer::{pretrain_world_model, run, TrainConfig, Variant};
use idmir::Result;

#[derive(Parser)]
#[command(name = "idmir", version, about = "Debiased model-based interactive recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct DataArgs {
    /// Canonical dataset directory; the bundled synthetic set when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<LoggedDataset> {
        match &self.data {
            Some(dir) => LoggedDataset::load_dir(dir),
            None => generate(&SyntheticSpec::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset (raw CSVs and canonical directory).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SyntheticSpec::default().seed)]
        seed: u64,
        #[arg(long, default_value_t = SyntheticSpec::default().n_users)]
        users: usize,
        #[arg(long, default_value_t = SyntheticSpec::default().n_items)]
        items: usize,
    },
    /// Parse raw interaction and trust CSVs into a canonical dataset directory.
    Ingest {
        #[arg(long)]
        interactions: PathBuf,
        #[arg(long)]
        trust: Option<PathBuf>,
        /// Ratings at or above this value are positives.
        #[arg(long, default_value_t = 4.0)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the matrix-factorisation ground-truth environment.
    FitEnv {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = FitConfig::default().rank)]
        rank: usize,
        #[arg(long, default_value_t = 0.9)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        horizon: usize,
        #[arg(long, default_value = "env")]
        out: PathBuf,
    },
    /// Pretrain the world model and write `world_model.ckpt`.
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant end to end; writes checkpoints, `manifest.json` and `curves.csv`.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate variants against the environment over several seeds.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', default_value = "dmir")]
        variant: Vec<Variant>,
        /// Number of seeds, run as 1..=n.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, value_delimiter = ',', default_value = "20,50")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        horizon: usize,
        /// Training config; the desk preset when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Environment directory from `fit-env`; fitted on the fly when omitted.
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long, default_value_t = 0.9)]
        alpha: f64,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Latent recovery bench on data from a known process; writes `recovery.json`.
    IdentBench {
        #[arg(long, default_value_t = 2)]
        nu: usize,
        #[arg(long, default_value_t = 2)]
        nc: usize,
        #[arg(long, default_value_t = 5)]
        regimes: usize,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>, fallback: TrainConfig) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_json_file(p),
        None => Ok(fallback),
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { out, seed, users, items } => {
            let spec = SyntheticSpec {
                seed,
                n_users: users,
                n_items: items,
                ..SyntheticSpec::default()
            };
            write_raw_csv(&spec, out.join("raw"))?;
            let ds = generate(&spec)?;
            ds.save_dir(out.join("dataset"))?;
            println!("{} users, {} items, {} records -> {}", ds.n_users, ds.n_items, ds.num_records(), out.display());
        }
        Command::Ingest { interactions, trust, threshold, out } => {
            let ds = LoggedDataset::from_csv(&interactions, trust.as_deref(), threshold, BuildOptions::default())?;
            ds.save_dir(&out)?;
            println!("{} users, {} items, {} records, {} buckets -> {}", ds.n_users, ds.n_items, ds.num_records(), ds.buckets.len(), out.display());
        }
        Command::FitEnv { data, rank, alpha, seed, horizon, out } => {
            let ds = data.load()?;
            let fit = FitConfig {
                rank,
                seed,
                ..FitConfig::default()
            };
            let model = fit_ground_truth(&ds, &fit)?;
            model.save(&out, alpha, horizon, Some(&fit))?;
            println!("rank {rank} environment -> {}", out.join("env.json").display());
        }
        Command::Pretrain { data, config, out } => {
            let ds = data.load()?;
            let cfg = load_config(config.as_deref(), TrainConfig::desk())?;
            cfg.validate()?;
            let (wm, curve) = pretrain_world_model(&ds, &cfg)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("world_model.ckpt");
            wm.save(&path)?;
            let last = curve.last().copied().unwrap_or(f64::NAN);
            println!("{} steps, final loss {last:.4} -> {}", curve.len(), path.display());
        }
        Command::Train { data, config, out } => {
            let ds = data.load()?;
            let cfg = load_config(config.as_deref(), TrainConfig::desk())?;
            let trained = run(&cfg, &ds, Some(&out))?;
            let m = &trained.manifest;
            println!("{} finished in {:.1}s -> {}", cfg.variant, m.wall_clock_secs, out.join("manifest.json").display());
        }
        Command::Eval {
            data,
            variant,
            seeds,
            k,
            horizon,
            config,
            env,
            alpha,
            out,
        } => {
            let ds = data.load()?;
            let cfg = load_config(config.as_deref(), TrainConfig::desk())?;
            let (model, alpha) = match env {
                Some(dir) => {
                    let (m, a, _) = MfModel::load(dir)?;
                    (m, a)
                }
                None => (fit_ground_truth(&ds, &FitConfig::default())?, alpha),
            };
            let env = EvalEnv { model: Arc::new(model), alpha };
            let seeds: Vec<u64> = (1..=seeds).collect();
            let reports = run_suite(&variant, &ds, &env, &cfg, horizon, &seeds, &k)?;
            write_reports(&reports, &out)?;
            print!("{}", format_table(&reports));
        }
        Command::IdentBench { nu, nc, regimes, seeds, out } => {
            let cfg = IdentConfig {
                n_u: nu,
                n_c: nc,
                regimes,
                ..IdentConfig::default()
            };
            let seeds: Vec<u64> = (1..=seeds).collect();
            let report = run_bench(&cfg, &seeds)?;
            std::fs::create_dir_all(&out)?;
            report.write(out.join("recovery.json"))?;
            println!(
                "mcc {:.3} (untrained {:.3}, lift {:.3}); s^c block R2 {:.3} (untrained {:.3})",
                report.mean_mcc, report.mean_baseline_mcc, report.mean_lift, report.mean_block_r2, report.mean_baseline_block_r2
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
