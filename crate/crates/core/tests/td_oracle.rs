//! Two-state deterministic MDP whose optimal Q-values are known in closed
//! form. States are histories; items are actions.

mod common;

use idmir::policy::{
    argmax_lowest, DqnConfig, DqnLearner, EncoderKind, Observation, PolicyConfig, QNetwork, ReplayBuffer, Transition,
};
use idmir::rng::rng_for;

const GAMMA: f64 = 0.5;

fn s0() -> Observation {
    Observation::new(vec![(1, 0)], 0)
}

fn s1() -> Observation {
    Observation::new(vec![(1, 0), (0, 1)], 0)
}

/// `(state, action, reward, next state or terminal)`.
fn transitions() -> Vec<Transition> {
    let t = |obs: Observation, action: usize, reward: f64, next: Option<Observation>| Transition {
        obs: obs.clone(),
        action,
        reward,
        feedback: u8::from(reward > 0.5),
        done: next.is_none(),
        next_obs: next.unwrap_or(obs),
    };
    vec![
        t(s0(), 0, 0.1, Some(s1())),
        t(s0(), 1, 0.3, None),
        t(s1(), 0, 0.8, None),
        t(s1(), 1, 0.2, None),
    ]
}

/// Value iteration on the table.
fn optimal_q() -> [[f64; 2]; 2] {
    let q1: [f64; 2] = [0.8, 0.2];
    let best1 = q1[0].max(q1[1]);
    [[0.1 + GAMMA * best1, 0.3], q1]
}

#[test]
fn dqn_recovers_tabular_optimum() {
    for double in [false, true] {
        let net = QNetwork::new(
            PolicyConfig {
                n_items: 2,
                dim: 4,
                memory_size: 4,
                encoder: EncoderKind::Contrastive,
            },
            7,
        )
        .unwrap();
        let mut learner = DqnLearner::new(
            net,
            DqnConfig {
                lr: 0.01,
                batch: 4,
                gamma: GAMMA,
                target_update: 25,
                update_size: 4,
                double,
                clip: 10.0,
            },
        );
        let mut buffer = ReplayBuffer::new(4);
        for t in transitions() {
            buffer.push(t);
        }
        learner.train(&buffer, 4000, &mut rng_for(1, &[])).unwrap();
        let want = optimal_q();
        for (s, obs) in [s0(), s1()].iter().enumerate() {
            let q = learner.net.q_values(obs).unwrap();
            for a in 0..2 {
                assert!((q[a] - want[s][a]).abs() < 0.02, "double={double} Q(s{s}, {a}) = {} want {}", q[a], want[s][a]);
            }
            assert_eq!(argmax_lowest(&q), argmax_lowest(&want[s]));
        }
    }
}

#[test]
fn td_targets_follow_bellman_backup() {
    let net = QNetwork::new(
        PolicyConfig {
            n_items: 5,
            dim: 3,
            memory_size: 3,
            encoder: EncoderKind::Contrastive,
        },
        2,
    )
    .unwrap();
    let batch = common::td_batch(5);
    let target = QNetwork::new(net.config.clone(), 9).unwrap().params;
    let next: Vec<Observation> = batch.iter().map(|t| t.next_obs.clone()).collect();
    let target_scores = net.scores_with(&target, &next).unwrap();
    let online_scores = net.scores_with(&net.params, &next).unwrap();
    for double in [false, true] {
        let got = net.td_targets(&target, &batch, 0.9, double).unwrap();
        for (i, t) in batch.iter().enumerate() {
            let want = if t.done {
                t.reward
            } else {
                let q_target: Vec<f64> = target_scores[i].iter().map(|s| s.exp()).collect();
                let q_online: Vec<f64> = online_scores[i].iter().map(|s| s.exp()).collect();
                let a = if double { argmax_lowest(&q_online) } else { argmax_lowest(&q_target) };
                t.reward + 0.9 * q_target[a]
            };
            assert!((got[i] - want).abs() < 1e-12, "double={double} row {i}: {} vs {want}", got[i]);
        }
    }
    // the target network parameters must not move during a TD step
    let before = net.params.clone();
    let mut learner = DqnLearner::new(net.clone(), DqnConfig { batch: 3, update_size: 1, ..DqnConfig::default() });
    learner.target = target.clone();
    learner.step_on(&batch).unwrap();
    assert!(learner.target.values_equal(&target));
    assert!(!learner.net.params.values_equal(&before));
}
