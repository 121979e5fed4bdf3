mod common;

use common::metric_oracle::{oracle_deviation, random_logs};
use idmir::eval::{diversity, f_measure, hr_at_k, ndcg_at_k, reward_curve, seed_metrics, EpisodeLog, EpisodeStep, MeanStd};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn metrics_match_oracles_on_one_hundred_logs() {
    let d = oracle_deviation();
    assert!(d < 1e-12, "max deviation {d:.3e}");
}

#[test]
fn k_beyond_episode_is_rejected() {
    let logs = random_logs(1, 2, 10, 5);
    assert!(hr_at_k(&logs, 11).is_err());
    assert!(ndcg_at_k(&logs, 0).is_err());
    assert!(seed_metrics(&logs, 0, &[]).is_err());
}

#[test]
fn random_policy_hit_ratio_matches_base_rate() {
    // feedback drawn at a fixed rate: HR@K concentrates around it
    let mut rng = idmir::rng::rng_for(5, &[]);
    let logs: Vec<EpisodeLog> = (0..2000)
        .map(|user| EpisodeLog {
            user,
            seed: 0,
            steps: (0..20)
                .map(|_| EpisodeStep {
                    item: 0,
                    accept_probability: 0.3,
                    feedback: u8::from(rng.random::<f64>() < 0.3),
                })
                .collect(),
        })
        .collect();
    let hr = hr_at_k(&logs, 20).unwrap();
    // four standard errors
    assert!((hr - 0.3).abs() < 4.0 * (0.3f64 * 0.7 / 40_000.0).sqrt(), "hr {hr}");
}

#[test]
fn sample_std_has_n_minus_one_denominator() {
    let m = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m.mean, 2.5);
    assert!((m.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(MeanStd::of(&[7.0]).std, 0.0);
}

fn arb_log() -> impl Strategy<Value = EpisodeLog> {
    prop::collection::vec((0usize..12, 0u8..=1), 1..40).prop_map(|steps| EpisodeLog {
        user: 0,
        seed: 0,
        steps: steps
            .into_iter()
            .map(|(item, feedback)| EpisodeStep {
                item,
                accept_probability: 0.5,
                feedback,
            })
            .collect(),
    })
}

proptest! {
    #[test]
    fn metrics_stay_in_unit_interval(log in arb_log(), k_frac in 0.0f64..1.0) {
        let k = 1 + ((log.steps.len() - 1) as f64 * k_frac) as usize;
        let logs = [log];
        let hr = hr_at_k(&logs, k).unwrap();
        let ndcg = ndcg_at_k(&logs, k).unwrap();
        let div = diversity(&logs);
        prop_assert!((0.0..=1.0).contains(&hr));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ndcg));
        prop_assert!(div > 0.0 && div <= 1.0);
        let f = f_measure(hr, div);
        prop_assert!(f >= 0.0 && f <= hr.max(div) + 1e-12);
        prop_assert!(f + 1e-12 >= hr.min(div) || hr == 0.0);
    }

    #[test]
    fn front_loaded_hits_have_unit_ndcg(hits in 1usize..20, misses in 0usize..20) {
        let steps: Vec<EpisodeStep> = (0..hits + misses)
            .map(|i| EpisodeStep { item: i, accept_probability: 0.5, feedback: u8::from(i < hits) })
            .collect();
        let logs = [EpisodeLog { user: 0, seed: 0, steps }];
        prop_assert!((ndcg_at_k(&logs, hits + misses).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((diversity(&logs) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reward_curve_is_monotone_and_ends_at_mean_reward(logs in prop::collection::vec(arb_log(), 1..6)) {
        let curve = reward_curve(&logs);
        prop_assert!(curve.windows(2).all(|w| w[1] >= w[0]));
        let mean = logs.iter().map(EpisodeLog::cumulative_reward).sum::<f64>() / logs.len() as f64;
        prop_assert!((curve.last().unwrap() - mean).abs() < 1e-12);
    }
}
