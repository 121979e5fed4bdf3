//! Trains the full model on the bundled data, writes checkpoints and the run
//! manifest, and evaluates the greedy policy against the simulator.
//!
//! cargo run --release --example train_dmir -- /tmp/idmir-run

use std::sync::Arc;

use idmir::data::synthetic::bundled;
use idmir::env::{fit_ground_truth, FitConfig};
use idmir::eval::{rollout_episodes, seed_metrics, EvalEnv, EvalPolicy};
use idmir::trainer::{run, TrainConfig};

fn main() -> idmir::Result<()> {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("idmir-run"));
    let ds = bundled();
    let cfg = TrainConfig { seed: 1, ..TrainConfig::desk() };
    let trained = run(&cfg, &ds, Some(&out))?;
    let m = &trained.manifest;
    println!("{} phases in {:.1}s, converged at loop {:?}", m.phases.len(), m.wall_clock_secs, m.converged_at);

    let env = EvalEnv { model: Arc::new(fit_ground_truth(&ds, &FitConfig::default())?), alpha: 0.9 };
    let users: Vec<usize> = (0..ds.n_users).collect();
    let policy = trained.policy.as_ref().expect("dmir trains a policy");
    for (name, p) in [("dmir", EvalPolicy::Greedy(policy)), ("random", EvalPolicy::Random)] {
        let logs = rollout_episodes(&env, &ds, p, &users, cfg.horizon, 1)?;
        let s = seed_metrics(&logs, 1, &[20])?;
        println!("{name:>6}: mean cumulative reward {:.3}, HR@20 {:.3}, diversity {:.3}", s.cumulative_reward, s.hr[&20], s.diversity);
    }
    println!("outputs -> {}", out.display());
    Ok(())
}
