//! Fits the matrix-factorisation simulator and shows interest decay under
//! repeated recommendation of one item.
//!
//! cargo run --release --example fit_env

use std::sync::Arc;

use idmir::data::synthetic::bundled;
use idmir::env::{fit_ground_truth, FitConfig, GroundTruthEnv};

fn main() -> idmir::Result<()> {
    let ds = bundled();
    let (train, test) = ds.split_train_test(0.8)?;
    let model = Arc::new(fit_ground_truth(&train, &FitConfig::default())?);
    let split = |d: &idmir::data::LoggedDataset, y: u8| d.records().filter(|r| r.feedback == y).map(|r| (r.user, r.item)).collect::<Vec<_>>();
    println!("held-out AUC {:.3}", model.auc(&split(&test, 1), &split(&test, 0))?);

    let user = 3;
    let item = (0..ds.n_items)
        .max_by(|&a, &b| model.base_probability(user, a).unwrap().total_cmp(&model.base_probability(user, b).unwrap()))
        .expect("nonempty catalogue");
    let mut env = GroundTruthEnv::new(model, 0.9, 8, 7)?;
    for _ in 0..8 {
        let s = env.step(user, item)?;
        println!("user {user} item {item} exposure {} -> p {:.4}, y {}", env.exposure_count(user, item), s.accept_probability, s.feedback);
    }
    Ok(())
}
