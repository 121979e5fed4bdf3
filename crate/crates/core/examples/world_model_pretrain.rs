//! Pretrains the world model on feedback drawn from a known teacher and
//! compares held-out NLL before and after, then queries the debiased
//! feedback estimate for one user.
//!
//! cargo run --release --example world_model_pretrain

use idmir::data::synthetic::bundled;
use idmir::rng::rng_for;
use idmir::trainer::{pretrain_world_model, TrainConfig};
use idmir::world_model::{full_windows, logged_sequences, resample_feedback, synthetic_teacher, Globals};

fn main() -> idmir::Result<()> {
    let ds = bundled();
    let teacher = synthetic_teacher(&ds, 16, 1001)?;
    let train = resample_feedback(&teacher, &ds, 1)?;
    let held = resample_feedback(&teacher, &ds, 501)?;
    let globals = Globals::of(&held);

    let cfg = TrainConfig { k_c: 300, seed: 1, ..TrainConfig::desk() };
    let (init, _) = pretrain_world_model(&train, &TrainConfig { k_c: 0, ..cfg.clone() })?;
    let (wm, curve) = pretrain_world_model(&train, &cfg)?;
    let seqs = logged_sequences(&held, wm.state_dim());
    let before = init.feedback_nll(&globals, &full_windows(&init, &globals, &seqs)?)?;
    let after = wm.feedback_nll(&globals, &full_windows(&wm, &globals, &seqs)?)?;
    println!("loss {:.3} -> {:.3} over {} steps", curve[0], curve[curve.len() - 1], curve.len());
    println!("held-out NLL {before:.4} -> {after:.4} ({:.0}% lower)", 100.0 * (1.0 - after / before));

    let seq = &seqs[0];
    let states = wm.fold_states(&globals, seq.user, &seq.init_state, &seq.steps)?;
    let last = seq.steps.len() - 1;
    let mut noise = rng_for(9, &[]);
    for item in [0, 10, 20] {
        let (p, _) = wm.debiased_feedback(&globals, seq.user, &seq.steps[last], &states[last], seq.steps[last].bucket, item, 16, Some(&mut noise))?;
        println!("user {} item {item}: debiased acceptance {p:.3}", seq.user);
    }
    Ok(())
}
