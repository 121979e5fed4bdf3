use idmir::ident::{block_r2, mcc, run_bench, IdentConfig, SyntheticProcess};
use idmir::rng::rng_for;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn gaussian_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_for(seed, &[]);
    (0..n).map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect()
}

#[test]
fn self_recovery_is_perfect() {
    let x = gaussian_rows(200, 3, 1);
    assert!((mcc(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    assert!(block_r2(&x, &x, 5).unwrap() > 1.0 - 1e-9);
}

#[test]
fn noise_scores_near_zero() {
    let truth = gaussian_rows(10_000, 2, 2);
    let noise = gaussian_rows(10_000, 2, 3);
    let m = mcc(&truth, &noise).unwrap();
    assert!(m < 0.2, "mcc {m}");
    assert!(block_r2(&truth, &noise, 5).unwrap() < 0.05);
}

#[test]
fn constant_estimate_has_zero_correlation() {
    let truth = gaussian_rows(50, 2, 4);
    let est: Vec<Vec<f64>> = truth.iter().map(|r| vec![r[0], 3.0]).collect();
    assert!((mcc(&truth, &est).unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn nonlinear_invertible_maps_are_recovered_by_the_block_score() {
    let truth = gaussian_rows(600, 2, 5);
    let est: Vec<Vec<f64>> = truth.iter().map(|r| vec![r[0] + 0.5 * r[1], r[1] - 0.3 * r[0] * r[0]]).collect();
    assert!(block_r2(&truth, &est, 5).unwrap() > 0.9);
}

#[test]
fn oversized_or_mismatched_inputs_are_errors() {
    let a = gaussian_rows(10, 7, 6);
    assert!(mcc(&a, &a).is_err());
    let b = gaussian_rows(9, 2, 7);
    let c = gaussian_rows(10, 2, 8);
    assert!(mcc(&b, &c).is_err());
    assert!(block_r2(&b, &c, 5).is_err());
}

#[test]
fn generated_labels_are_balanced_and_timestamps_follow_regimes() {
    let cfg = IdentConfig::default();
    for seed in 1..=3 {
        let p = SyntheticProcess::sample(&cfg, seed).unwrap();
        let (ds, latents) = p.generate(cfg.users, cfg.steps, seed).unwrap();
        let rate = ds.records().filter(|r| r.feedback == 1).count() as f64 / ds.num_records() as f64;
        assert!((0.2..=0.8).contains(&rate), "seed {seed} base rate {rate}");
        assert_eq!(ds.buckets.len(), cfg.regimes);
        assert_eq!(latents.user_states.len(), cfg.users);
        assert!(latents.user_states.iter().all(|s| s.len() == cfg.steps && s.iter().all(|v| v.len() == cfg.n_u)));
        for r in ds.records() {
            assert_eq!(ds.bucket_of(r.timestamp), p.regime_of((r.timestamp as usize) % cfg.steps, cfg.steps));
        }
    }
}

#[test]
fn more_regimes_do_not_reduce_recovery() {
    let seeds = [1, 2, 3];
    let one = run_bench(&IdentConfig { regimes: 1, ..IdentConfig::default() }, &seeds).unwrap();
    let five = run_bench(&IdentConfig::default(), &seeds).unwrap();
    eprintln!("mean MCC with 1 regime {:.3}, with 5 regimes {:.3}", one.mean_mcc, five.mean_mcc);
    assert!(five.mean_mcc >= one.mean_mcc);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mcc_is_invariant_to_permutation_and_sign(
        seed in any::<u64>(),
        d in 1usize..=4,
        perm_seed in any::<u64>(),
    ) {
        let truth = gaussian_rows(60, d, seed);
        let mut rng = rng_for(perm_seed, &[]);
        let mut order: Vec<usize> = (0..d).collect();
        for i in (1..d).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let signs: Vec<f64> = (0..d).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let est: Vec<Vec<f64>> = truth.iter().map(|r| order.iter().zip(&signs).map(|(&j, s)| s * r[j]).collect()).collect();
        prop_assert!((mcc(&truth, &est).unwrap() - 1.0).abs() < 1e-12);
        let noisy: Vec<Vec<f64>> = est.iter().map(|r| r.iter().map(|v| v * 2.0 + 1.0).collect()).collect();
        prop_assert!((mcc(&truth, &noisy).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mcc_lies_in_unit_interval(a in any::<u64>(), b in any::<u64>(), d in 1usize..=3) {
        let m = mcc(&gaussian_rows(30, d, a), &gaussian_rows(30, d, b)).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&m));
    }
}
