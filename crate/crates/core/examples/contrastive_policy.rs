//! The contrastive Q-network: state encoding from positive and negative
//! histories, Q-values, and a few DQN updates on hand-made transitions.
//!
//! cargo run --release --example contrastive_policy

use idmir::policy::{contrastive_identity_check, DqnConfig, DqnLearner, EncoderKind, Observation, PolicyConfig, QNetwork, ReplayBuffer, Transition};
use idmir::rng::rng_for;

fn main() -> idmir::Result<()> {
    let cfg = PolicyConfig { n_items: 6, dim: 8, memory_size: 5, encoder: EncoderKind::Contrastive };
    let net = QNetwork::new(cfg, 1)?;
    let obs = Observation::new(vec![(0, 1), (3, 0), (1, 1)], 0);
    let state = net.encode_state(&obs)?;
    // -ln sigmoid(a.o+ - a.o-) is the softmax loss over the two histories
    let a: Vec<f64> = (0..8).map(|j| 0.1 * j as f64 - 0.3).collect();
    let (lhs, rhs) = contrastive_identity_check(&a, &state.o_plus, &state.o_minus);
    println!("identity sides {lhs:.6} / {rhs:.6}");
    let q = net.q_values(&obs)?;
    println!("Q before training: {}", q.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" "));

    // item 2 always pays off, everything else never does
    let mut buffer = ReplayBuffer::new(256);
    for a in 0..6 {
        for _ in 0..20 {
            let reward = if a == 2 { 1.0 } else { 0.0 };
            let next = Observation::new(vec![(0, 1), (3, 0), (1, 1), (a, reward as u8)], 0);
            buffer.push(Transition { obs: obs.clone(), action: a, reward, feedback: reward as u8, next_obs: next, done: true });
        }
    }
    let mut learner = DqnLearner::new(net, DqnConfig { lr: 0.01, batch: 32, update_size: 32, target_update: 20, ..DqnConfig::default() });
    let losses = learner.train(&buffer, 300, &mut rng_for(2, &[]))?;
    println!("TD loss {:.4} -> {:.4}", losses[0], losses[losses.len() - 1]);
    let q = learner.net.q_values(&obs)?;
    println!("Q after training:  {}", q.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" "));
    Ok(())
}
