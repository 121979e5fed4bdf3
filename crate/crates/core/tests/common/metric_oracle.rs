use std::collections::HashSet;

use idmir::eval::{diversity, hr_at_k, ndcg_at_k, seed_metrics, EpisodeLog, EpisodeStep};
use rand::Rng;

/// Independent metric implementations used as oracles.
pub mod oracle {
    use super::*;

    pub fn hr(log: &EpisodeLog, k: usize) -> f64 {
        log.steps.iter().take(k).map(|s| s.feedback as f64).sum::<f64>() / k as f64
    }

    fn dcg(gains: &[f64]) -> f64 {
        gains.iter().enumerate().map(|(i, g)| g * std::f64::consts::LN_2 / ((i + 2) as f64).ln()).sum()
    }

    pub fn ndcg(log: &EpisodeLog, k: usize) -> f64 {
        let gains: Vec<f64> = log.steps.iter().take(k).map(|s| s.feedback as f64).collect();
        let mut ideal = gains.clone();
        ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let best = dcg(&ideal);
        if best == 0.0 {
            0.0
        } else {
            dcg(&gains) / best
        }
    }

    pub fn diversity(log: &EpisodeLog) -> f64 {
        let distinct: HashSet<usize> = log.steps.iter().map(|s| s.item).collect();
        distinct.len() as f64 / log.steps.len() as f64
    }

    pub fn mean(logs: &[EpisodeLog], f: impl Fn(&EpisodeLog) -> f64) -> f64 {
        logs.iter().map(f).sum::<f64>() / logs.len() as f64
    }
}

pub fn random_logs(seed: u64, users: usize, horizon: usize, n_items: usize) -> Vec<EpisodeLog> {
    let mut rng = idmir::rng::rng_for(seed, &[]);
    (0..users)
        .map(|user| {
            let rate: f64 = rng.random();
            EpisodeLog {
                user,
                seed,
                steps: (0..horizon)
                    .map(|_| {
                        let p: f64 = rng.random();
                        EpisodeStep {
                            item: rng.random_range(0..n_items),
                            accept_probability: p,
                            feedback: u8::from(rng.random::<f64>() < rate),
                        }
                    })
                    .collect(),
            }
        })
        .collect()
}

/// Largest deviation between library and oracle over 100 random logs.
pub fn oracle_deviation() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let logs = random_logs(seed, 1 + seed as usize % 7, 50, 1 + seed as usize % 40);
        for k in [1, 5, 20, 50] {
            worst = worst.max((hr_at_k(&logs, k).unwrap() - oracle::mean(&logs, |l| oracle::hr(l, k))).abs());
            worst = worst.max((ndcg_at_k(&logs, k).unwrap() - oracle::mean(&logs, |l| oracle::ndcg(l, k))).abs());
        }
        let div = oracle::mean(&logs, oracle::diversity);
        worst = worst.max((diversity(&logs) - div).abs());
        let hr20 = oracle::mean(&logs, |l| oracle::hr(l, 20));
        let m = seed_metrics(&logs, seed, &[20, 50]).unwrap();
        let f = if hr20 == 0.0 || div == 0.0 { 0.0 } else { 2.0 / (1.0 / hr20 + 1.0 / div) };
        worst = worst.max((m.f_measure - f).abs());
    }
    worst
}
