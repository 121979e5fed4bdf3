mod common;

use idmir::autodiff::Graph;
use idmir::layers::{gaussian_kl_std, Dropout};
use idmir::policy::contrastive_identity_check;
use idmir::rng::rng_for;
use idmir::world_model::{full_windows, logged_sequences, negative_elbo, resample_feedback, ElboTrainConfig, ElboTrainer, Globals, Step};
use idmir::Tensor;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn elbo_graph_has_one_nonnegative_kl_term_per_batch() {
    let ds = common::tiny_dataset();
    let globals = Globals::of(&ds);
    let wm = common::tiny_world_model(&ds, 2);
    let seqs = logged_sequences(&ds, wm.state_dim());
    let trainer = ElboTrainer::new(ElboTrainConfig { batch: 3, window: 4, ..Default::default() });
    let mut rng = rng_for(4, &[]);
    for _ in 0..20 {
        let windows = trainer.sample_windows(&wm, &globals, &seqs, &mut rng).unwrap();
        let mut g = Graph::new();
        let mut noise = rng_for(rng.random(), &[]);
        let mut drop_rng = rng_for(rng.random(), &[]);
        let mut dropout = Dropout::train(0.3, &mut drop_rng);
        let nodes = wm.elbo_loss(&mut g, &globals, &windows, Some(&mut noise), &mut dropout).unwrap();
        assert_eq!(g.count_kind(nodes.total, "kl_std_normal"), 1);
        assert!(g.value(nodes.kl).item() >= 0.0);
        let sum = g.value(nodes.kl).item() + g.value(nodes.nll_current).item() + g.value(nodes.nll_previous).item();
        assert!((g.value(nodes.total).item() - sum).abs() < 1e-12);
    }
}

#[test]
fn recursion_and_prediction_ignore_unrelated_feedback() {
    // f_s takes no feedback input: flipping every label leaves the states unchanged
    let ds = common::tiny_dataset();
    let globals = Globals::of(&ds);
    let wm = common::tiny_world_model(&ds, 3);
    let seq = &logged_sequences(&ds, wm.state_dim())[0];
    let flipped: Vec<Step> = seq.steps.iter().map(|s| Step { feedback: 1 - s.feedback, ..*s }).collect();
    let a = wm.fold_states(&globals, seq.user, &seq.init_state, &seq.steps).unwrap();
    let b = wm.fold_states(&globals, seq.user, &seq.init_state, &flipped).unwrap();
    assert_eq!(a, b);
    let p = wm.predict_feedback(&globals, &seq.steps[1], &a[1], None).unwrap();
    assert!(p > 0.0 && p < 1.0);
}

#[test]
fn resampled_feedback_is_seeded_and_keeps_items() {
    let ds = common::tiny_dataset();
    let teacher = common::tiny_world_model(&ds, 8);
    let a = resample_feedback(&teacher, &ds, 1).unwrap();
    assert_eq!(a, resample_feedback(&teacher, &ds, 1).unwrap());
    for (x, y) in a.records().zip(ds.records()) {
        assert_eq!((x.user, x.item, x.timestamp), (y.user, y.item, y.timestamp));
    }
    assert_eq!(a.popularity, ds.popularity);
}

#[test]
fn held_out_nll_of_a_constant_predictor_is_binary_entropy() {
    // zero output weights: every prediction is sigmoid(bias)
    let ds = common::tiny_dataset();
    let globals = Globals::of(&ds);
    let mut wm = common::tiny_world_model(&ds, 5);
    let w = wm.params.id("fy.out.weight").unwrap();
    wm.params.value_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let b = wm.params.id("fy.out.bias").unwrap();
    wm.params.value_mut(b).data_mut()[0] = 0.4;
    let seqs = logged_sequences(&ds, wm.state_dim());
    let windows = full_windows(&wm, &globals, &seqs).unwrap();
    let p = 1.0 / (1.0 + (-0.4f64).exp());
    let labels: Vec<u8> = windows.iter().flat_map(|w| w.steps.iter().map(|s| s.feedback)).collect();
    let want = labels.iter().map(|&y| if y == 1 { -p.ln() } else { -(1.0 - p).ln() }).sum::<f64>() / labels.len() as f64;
    assert!((wm.feedback_nll(&globals, &windows).unwrap() - want).abs() < 1e-12);
}

/// Largest disagreement between the two sides of the contrastive identity.
pub fn identity_gap(draws: usize, seed: u64) -> f64 {
    let mut rng = rng_for(seed, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let d = rng.random_range(1..=32);
        let scale = 10f64.powf(rng.random_range(-2.0..1.0));
        let mut v = || (0..d).map(|_| scale * rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (a, p, m) = (v(), v(), v());
        let (l, r) = contrastive_identity_check(&a, &p, &m);
        worst = worst.max((l - r).abs());
    }
    worst
}

#[test]
fn contrastive_identity_holds_on_random_draws() {
    let gap = identity_gap(10_000, 1);
    assert!(gap < 1e-12, "gap {gap:.3e}");
}

fn kl_oracle(mu: &[f64], sigma: &[f64]) -> f64 {
    mu.iter().zip(sigma).map(|(m, s)| 0.5 * (s * s + m * m - 1.0) - s.ln()).sum()
}

proptest! {
    #[test]
    fn gaussian_kl_matches_closed_form_and_is_nonnegative(
        pairs in prop::collection::vec((-5.0f64..5.0, 1e-3f64..5.0), 1..12),
    ) {
        let (mu, sigma): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let kl = gaussian_kl_std(&Tensor::vector(mu.clone()), &Tensor::vector(sigma.clone())).unwrap();
        prop_assert!(kl >= 0.0);
        prop_assert!((kl - kl_oracle(&mu, &sigma)).abs() <= 1e-10 * kl_oracle(&mu, &sigma).abs().max(1.0));
    }

    #[test]
    fn negative_elbo_is_at_least_the_kl(
        mu in prop::collection::vec(-3.0f64..3.0, 3),
        sigma in prop::collection::vec(0.01f64..3.0, 3),
        pc in 0.001f64..0.999, pp in 0.001f64..0.999, yc in 0u8..=1, yp in 0u8..=1,
    ) {
        let total = negative_elbo(&mu, &sigma, pc, yc, pp, yp).unwrap();
        prop_assert!(total + 1e-12 >= kl_oracle(&mu, &sigma));
    }

    #[test]
    fn identity_sides_agree(
        a in prop::collection::vec(-4.0f64..4.0, 1..16),
        seed in any::<u64>(),
    ) {
        let mut rng = rng_for(seed, &[]);
        let p: Vec<f64> = a.iter().map(|_| rng.random_range(-4.0..4.0)).collect();
        let m: Vec<f64> = a.iter().map(|_| rng.random_range(-4.0..4.0)).collect();
        let (l, r) = contrastive_identity_check(&a, &p, &m);
        prop_assert!((l - r).abs() < 1e-12);
        prop_assert!(l >= 0.0);
    }
}
