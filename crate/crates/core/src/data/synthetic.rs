//! Deterministic community-structured logs used as the bundled desk dataset.
//!
//! Users and items belong to latent communities. The logging policy over-exposes
//! trending items, so raw acceptance counts are confounded by popularity, and
//! re-exposed items are accepted with probability decayed by `alpha` per repeat.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::dataset::{BuildOptions, LoggedDataset};
use super::ingest::{InteractionRecord, TrustEdge};
use crate::error::Result;
use crate::rng::rng_for;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_communities: usize,
    pub records_per_user: usize,
    pub n_buckets: usize,
    pub bucket_span: i64,
    pub friends_per_user: usize,
    pub trending_per_bucket: usize,
    pub alpha: f64,
    /// Logging-policy mix: re-expose a seen item, a trending item, an
    /// own-community item; the remainder is uniform.
    pub repeat_share: f64,
    pub trending_share: f64,
    pub community_share: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_users: 50,
            n_items: 100,
            n_communities: 4,
            records_per_user: 120,
            n_buckets: 12,
            bucket_span: 1000,
            friends_per_user: 4,
            trending_per_bucket: 10,
            alpha: 0.9,
            repeat_share: 0.15,
            trending_share: 0.3,
            community_share: 0.3,
            seed: 20_240_601,
        }
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Latent truth behind a generated log.
#[derive(Clone, Debug)]
pub struct SyntheticTruth {
    pub user_community: Vec<usize>,
    pub item_community: Vec<usize>,
    /// Preference logit per (user, item), row-major `n_users x n_items`.
    pub affinity: Vec<f64>,
    /// Trending items per bucket.
    pub trending: Vec<Vec<usize>>,
}

impl SyntheticTruth {
    pub fn affinity(&self, n_items: usize, user: usize, item: usize) -> f64 {
        self.affinity[user * n_items + item]
    }
}

/// Raw generated log before bucketing.
#[derive(Clone, Debug)]
pub struct SyntheticLog {
    pub records: Vec<InteractionRecord>,
    pub trust: Vec<TrustEdge>,
    pub truth: SyntheticTruth,
}

pub fn generate_log(spec: &SyntheticSpec) -> SyntheticLog {
    let mut rng = rng_for(spec.seed, &[0x5e_ed]);
    let c = spec.n_communities.max(1);
    let user_community: Vec<usize> = (0..spec.n_users).map(|u| u % c).collect();
    let item_community: Vec<usize> = (0..spec.n_items).map(|i| i % c).collect();
    let user_taste: Vec<f64> = (0..spec.n_users).map(|_| 0.4 * rng.sample::<f64, _>(StandardNormal)).collect();
    let item_quality: Vec<f64> = (0..spec.n_items).map(|_| 0.6 * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut affinity = Vec::with_capacity(spec.n_users * spec.n_items);
    for u in 0..spec.n_users {
        for i in 0..spec.n_items {
            let same = user_community[u] == item_community[i];
            let base = if same { 2.0 } else { -2.0 };
            let noise: f64 = 0.5 * rng.sample::<f64, _>(StandardNormal);
            affinity.push(base + user_taste[u] + item_quality[i] + noise);
        }
    }
    let trending: Vec<Vec<usize>> = (0..spec.n_buckets)
        .map(|_| {
            let all: Vec<usize> = (0..spec.n_items).collect();
            all.choose_multiple(&mut rng, spec.trending_per_bucket.min(spec.n_items))
                .copied()
                .collect()
        })
        .collect();

    let total_span = spec.bucket_span * spec.n_buckets as i64;
    let mut trust = Vec::new();
    for u in 0..spec.n_users {
        for _ in 0..spec.friends_per_user {
            let v = if rng.random::<f64>() < 0.8 {
                let peers: Vec<usize> = (0..spec.n_users)
                    .filter(|&v| v != u && user_community[v] == user_community[u])
                    .collect();
                match peers.choose(&mut rng) {
                    Some(&v) => v,
                    None => continue,
                }
            } else {
                rng.random_range(0..spec.n_users)
            };
            if v != u {
                trust.push(TrustEdge {
                    truster: u,
                    trustee: v,
                    timestamp: rng.random_range(0..total_span),
                });
            }
        }
    }
    trust.sort();
    trust.dedup_by_key(|e| (e.truster, e.trustee));

    let mut records = Vec::with_capacity(spec.n_users * spec.records_per_user);
    let step = total_span / spec.records_per_user.max(1) as i64;
    for u in 0..spec.n_users {
        let mut exposures: HashMap<usize, i32> = HashMap::new();
        let mut seen: Vec<usize> = Vec::new();
        let own: Vec<usize> = (0..spec.n_items).filter(|&i| item_community[i] == user_community[u]).collect();
        for k in 0..spec.records_per_user {
            let ts = k as i64 * step + rng.random_range(0..step.max(1));
            let bucket = ((ts / spec.bucket_span) as usize).min(spec.n_buckets - 1);
            let roll: f64 = rng.random();
            let (r1, r2) = (spec.repeat_share, spec.repeat_share + spec.trending_share);
            let r3 = r2 + spec.community_share;
            let item = if roll < r1 && !seen.is_empty() {
                *seen.choose(&mut rng).expect("non-empty")
            } else if roll < r2 && !trending[bucket].is_empty() {
                *trending[bucket].choose(&mut rng).expect("trending set")
            } else if roll < r3 {
                *own.choose(&mut rng).unwrap_or(&0)
            } else {
                rng.random_range(0..spec.n_items)
            };
            let boost = if trending[bucket].contains(&item) { 0.5 } else { 0.0 };
            let c = exposures.entry(item).or_insert(0);
            let p = logistic(affinity[u * spec.n_items + item] + boost) * spec.alpha.powi(*c);
            *c += 1;
            seen.push(item);
            let feedback = u8::from(rng.random::<f64>() < p);
            records.push(InteractionRecord { user: u, item, feedback, timestamp: ts });
        }
    }
    SyntheticLog {
        records,
        trust,
        truth: SyntheticTruth {
            user_community,
            item_community,
            affinity,
            trending,
        },
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<LoggedDataset> {
    let log = generate_log(spec);
    LoggedDataset::build(log.records, log.trust, spec.n_users, spec.n_items, BuildOptions::default())
}

/// The bundled 50-user, 100-item desk dataset.
pub fn bundled() -> LoggedDataset {
    generate(&SyntheticSpec::default()).expect("bundled spec is valid")
}

/// Writes `interactions.csv` (1-5 ratings) and `trust.csv` in the raw input
/// format, so the bundled set can be re-read with threshold 4.
pub fn write_raw_csv(spec: &SyntheticSpec, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let log = generate_log(spec);
    let mut w = csv::Writer::from_path(dir.join("interactions.csv"))?;
    w.write_record(["user", "item", "rating", "timestamp"])?;
    for r in &log.records {
        // deterministic rating spread on each side of the threshold
        let rating = if r.feedback == 1 { 4 + (r.item + r.user) % 2 } else { 1 + (r.item + r.user) % 3 };
        w.write_record([r.user.to_string(), r.item.to_string(), rating.to_string(), r.timestamp.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("trust.csv"))?;
    w.write_record(["truster", "trustee", "timestamp"])?;
    for e in &log.trust {
        w.write_record([e.truster.to_string(), e.trustee.to_string(), e.timestamp.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
