mod common;

use idmir::rng::derive_seed;
use idmir::trainer::{pretrain_world_model, run, run_with, Phase, RunManifest, TrainConfig, Variant};
use idmir::world_model::{WorldModel, WorldModelConfig};

/// Five users, four-step episodes: 20 transitions per loop.
fn small_config() -> TrainConfig {
    TrainConfig {
        dim: 4,
        k_c: 6,
        k_c_finetune: Some(3),
        k_q: 4,
        batch: 8,
        buffer: 1000,
        update_size: 30,
        target_update: 2,
        episodes: 3,
        horizon: 4,
        memory_size: 3,
        wm_batch: 4,
        wm_window: 5,
        reward_samples: 2,
        convergence_loops: 10,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_pretrain_steps_leave_the_initial_model() {
    let ds = common::tiny_dataset();
    let cfg = TrainConfig { k_c: 0, ..small_config() };
    let (wm, curve) = pretrain_world_model(&ds, &cfg).unwrap();
    assert!(curve.is_empty());
    let mut wc = WorldModelConfig::new(ds.n_users, ds.n_items, cfg.dim);
    wc.dropout = cfg.droprate;
    let fresh = WorldModel::new(wc, derive_seed(cfg.seed, &[0x3d])).unwrap();
    assert!(wm.params.values_equal(&fresh.params));
}

#[test]
fn zero_finetune_steps_leave_the_pretrained_model() {
    let ds = common::tiny_dataset();
    let cfg = TrainConfig { k_c_finetune: Some(0), ..small_config() };
    let pretrained = pretrain_world_model(&ds, &cfg).unwrap();
    let trained = run_with(&cfg, &ds, Some(pretrained.clone()), None).unwrap();
    assert!(trained.world_model.unwrap().params.values_equal(&pretrained.0.params));
    assert!(trained.manifest.curves.finetune.is_empty());
}

#[test]
fn runs_are_deterministic_per_seed() {
    let ds = common::tiny_dataset();
    let cfg = small_config();
    let a = run(&cfg, &ds, None).unwrap();
    let b = run(&cfg, &ds, None).unwrap();
    assert!(a.manifest.same_run(&b.manifest));
    assert!(a.policy.as_ref().unwrap().params.values_equal(&b.policy.as_ref().unwrap().params));
    assert!(a.world_model.as_ref().unwrap().params.values_equal(&b.world_model.as_ref().unwrap().params));
    let c = run(&TrainConfig { seed: 6, ..cfg }, &ds, None).unwrap();
    assert!(!a.policy.unwrap().params.values_equal(&c.policy.unwrap().params));
}

#[test]
fn phases_run_in_order_and_policy_waits_for_the_buffer() {
    let ds = common::tiny_dataset();
    let cfg = small_config();
    let m = run(&cfg, &ds, None).unwrap().manifest;
    assert_eq!(m.phases[0].phase, Phase::Pretrain);
    assert_eq!(m.phases[0].steps, cfg.k_c);
    let rest = &m.phases[1..];
    assert_eq!(rest.len(), 3 * cfg.episodes);
    for (l, chunk) in rest.chunks(3).enumerate() {
        let kinds: Vec<Phase> = chunk.iter().map(|p| p.phase).collect();
        assert_eq!(kinds, [Phase::Collect, Phase::Policy, Phase::Finetune]);
        assert!(chunk.iter().all(|p| p.outer_loop == Some(l)));
        assert_eq!(chunk[0].steps, ds.n_users * cfg.horizon);
        let buffered = (l + 1) * ds.n_users * cfg.horizon;
        let want = if buffered < cfg.update_size { 0 } else { cfg.k_q };
        assert_eq!(chunk[1].steps, want, "loop {l} with {buffered} buffered");
        assert_eq!(chunk[2].steps, 3);
    }
    assert_eq!(m.curves.policy.len(), 2 * cfg.k_q);
    assert_eq!(m.curves.episode_reward.len(), cfg.episodes);
}

#[test]
fn offline_and_random_variants_skip_the_world_model() {
    let ds = common::tiny_dataset();
    let d = run(&TrainConfig { variant: Variant::DmirD, ..small_config() }, &ds, None).unwrap();
    assert!(d.world_model.is_none() && d.policy.is_some());
    assert!(d.manifest.phases.iter().all(|p| p.phase == Phase::Offline));
    // the update size is capped at the logged transition count
    assert!(d.manifest.phases.iter().all(|p| p.steps == 4));
    let r = run(&TrainConfig { variant: Variant::Random, ..small_config() }, &ds, None).unwrap();
    assert!(r.world_model.is_none() && r.policy.is_none() && r.manifest.phases.is_empty());
}

#[test]
fn outputs_are_written_and_readable() {
    let ds = common::tiny_dataset();
    let tmp = tempfile::tempdir().unwrap();
    let trained = run(&small_config(), &ds, Some(tmp.path())).unwrap();
    let back = RunManifest::read(tmp.path()).unwrap();
    assert_eq!(back, trained.manifest);
    for f in ["manifest.json", "curves.csv", "world_model.ckpt", "policy.ckpt"] {
        assert!(tmp.path().join(f).exists(), "{f} missing");
    }
    let wm = WorldModel::load(tmp.path().join("world_model.ckpt")).unwrap();
    assert!(wm.params.values_equal(&trained.world_model.unwrap().params));
}

#[test]
fn invalid_config_files_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("cfg.json");
    std::fs::write(&p, r#"{"gamma": 1.5}"#).unwrap();
    assert!(TrainConfig::from_json_file(&p).is_err());
    std::fs::write(&p, r#"{"k_q": 7, "variant": "dqn+wm"}"#).unwrap();
    let c = TrainConfig::from_json_file(&p).unwrap();
    assert_eq!((c.k_q, c.variant, c.batch), (7, Variant::DqnWm, TrainConfig::default().batch));
}
