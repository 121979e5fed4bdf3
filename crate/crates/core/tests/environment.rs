use std::sync::Arc;

use idmir::data::synthetic::bundled;
use idmir::env::{fit_ground_truth, FitConfig, GroundTruthEnv, MfModel};
use idmir::eval::{rollout_episodes, EvalEnv, EvalPolicy};
use proptest::prelude::*;

fn model(n_users: usize, n_items: usize, seed: u64) -> Arc<MfModel> {
    Arc::new(MfModel::init(n_users, n_items, 4, 1.0, seed))
}

/// Ratio of consecutive acceptance probabilities over `repeats` exposures of
/// one item, and the first probability.
pub fn decay_ratios(m: &Arc<MfModel>, alpha: f64, user: usize, item: usize, repeats: usize) -> (f64, Vec<f64>) {
    let mut env = GroundTruthEnv::new(m.clone(), alpha, repeats, 0).unwrap();
    let ps: Vec<f64> = (0..repeats).map(|_| env.step(user, item).unwrap().accept_probability).collect();
    (ps[0], ps.windows(2).map(|w| w[1] / w[0]).collect())
}

#[test]
fn each_repeat_multiplies_by_alpha() {
    let m = model(3, 7, 1);
    for alpha in [0.9, 0.5, 1.0] {
        let (p0, ratios) = decay_ratios(&m, alpha, 2, 5, 12);
        let base = 1.0 / (1.0 + (-m.score(2, 5).unwrap()).exp());
        assert!((p0 - base).abs() < 1e-15);
        for r in ratios {
            assert!((r - alpha).abs() < 1e-12, "ratio {r} for alpha {alpha}");
        }
    }
}

#[test]
fn exposure_counts_are_per_user_and_item() {
    let m = model(2, 3, 2);
    let mut env = GroundTruthEnv::new(m.clone(), 0.9, 10, 0).unwrap();
    env.step(0, 1).unwrap();
    env.step(0, 1).unwrap();
    env.step(1, 1).unwrap();
    assert_eq!(env.exposure_count(0, 1), 2);
    assert_eq!(env.exposure_count(1, 1), 1);
    assert_eq!(env.exposure_count(0, 2), 0);
    let base = m.base_probability(0, 2).unwrap();
    assert_eq!(env.accept_probability(0, 2).unwrap(), base);
    env.reset(0);
    assert_eq!(env.exposure_count(0, 1), 0);
    assert_eq!(env.exposure_count(1, 1), 1);
}

#[test]
fn transcripts_are_byte_identical_across_runs_and_thread_counts() {
    let ds = bundled();
    let env = EvalEnv {
        model: Arc::new(fit_ground_truth(&ds, &FitConfig { epochs: 3, ..FitConfig::default() }).unwrap()),
        alpha: 0.9,
    };
    let users: Vec<usize> = (0..ds.n_users).collect();
    let run = |threads: usize| -> String {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            rollout_episodes(&env, &ds, EvalPolicy::Random, &users, 20, 17)
                .unwrap()
                .iter()
                .map(|l| l.transcript())
                .collect()
        })
    };
    let a = run(1);
    assert_eq!(a, run(1));
    assert_eq!(a, run(4));
    assert_ne!(a, {
        let logs = rollout_episodes(&env, &ds, EvalPolicy::Random, &users, 20, 18).unwrap();
        logs.iter().map(|l| l.transcript()).collect::<String>()
    });
}

proptest! {
    #[test]
    fn acceptance_probability_is_base_times_alpha_power(
        alpha in 0.05f64..=1.0,
        seq in prop::collection::vec(0usize..4, 1..30),
    ) {
        let m = model(1, 4, 3);
        let mut env = GroundTruthEnv::new(m.clone(), alpha, seq.len(), 9).unwrap();
        let mut counts = [0i32; 4];
        for &item in &seq {
            let r = env.step(0, item).unwrap();
            let want = m.base_probability(0, item).unwrap() * alpha.powi(counts[item]);
            prop_assert!((r.accept_probability - want).abs() <= 1e-15 * want.max(1.0));
            prop_assert!(r.feedback <= 1);
            counts[item] += 1;
        }
        prop_assert!(env.step(0, 0).is_err());
    }
}
