use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ingest::{parse_interactions, parse_trust, IdMap, InteractionRecord, TrustEdge};
use super::popularity::{compute_popularity, PopularitySeries, DEFAULT_SMOOTHING};
use super::social::{snapshot_graph, SocialGraphSeries, DEFAULT_NEIGHBOR_CAP};
use crate::error::{Error, Result};

/// Number of buckets when no width is given.
pub const DEFAULT_BUCKET_COUNT: i64 = 12;

/// Contiguous time buckets identified by their inclusive end timestamps.
/// Bucket `t` covers `(end_{t-1}, end_t]`; timestamps before the first end
/// fall in bucket 0 and after the last end in the last bucket.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Buckets {
    ends: Vec<i64>,
}

impl Buckets {
    pub fn from_ends(ends: Vec<i64>) -> Self {
        assert!(!ends.is_empty(), "at least one bucket");
        assert!(ends.windows(2).all(|w| w[0] < w[1]), "bucket ends must increase");
        Self { ends }
    }

    /// Buckets of `width` starting at `min_ts` covering up to `max_ts`.
    pub fn from_width(min_ts: i64, max_ts: i64, width: i64) -> Self {
        assert!(width > 0, "bucket width must be positive");
        let span = (max_ts - min_ts + 1).max(1);
        let count = (span + width - 1) / width;
        Self::from_ends((1..=count).map(|k| min_ts + k * width - 1).collect())
    }

    /// Width giving [`DEFAULT_BUCKET_COUNT`] buckets over the span.
    pub fn default_width(min_ts: i64, max_ts: i64) -> i64 {
        let span = (max_ts - min_ts + 1).max(1);
        ((span + DEFAULT_BUCKET_COUNT - 1) / DEFAULT_BUCKET_COUNT).max(1)
    }

    pub fn len(&self) -> usize {
        self.ends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ends.is_empty()
    }

    pub fn ends(&self) -> &[i64] {
        &self.ends
    }

    pub fn bucket_of(&self, ts: i64) -> usize {
        self.ends.partition_point(|&e| e < ts).min(self.ends.len() - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    /// `None` picks [`Buckets::default_width`].
    pub bucket_width: Option<i64>,
    pub smoothing: f64,
    pub neighbor_cap: usize,
    pub undirected: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            bucket_width: None,
            smoothing: DEFAULT_SMOOTHING,
            neighbor_cap: DEFAULT_NEIGHBOR_CAP,
            undirected: true,
        }
    }
}

/// A logged interaction dataset with its time-bucketed popularity and social
/// graph series. Users and items are dense ids.
#[derive(Clone, Debug, PartialEq)]
pub struct LoggedDataset {
    pub n_users: usize,
    pub n_items: usize,
    /// Per-user records in timestamp order (stable for equal timestamps).
    pub user_records: Vec<Vec<InteractionRecord>>,
    pub trust: Vec<TrustEdge>,
    pub buckets: Buckets,
    pub popularity: PopularitySeries,
    pub social: SocialGraphSeries,
    pub options: BuildOptions,
    pub user_ids: IdMap,
    pub item_ids: IdMap,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    n_users: usize,
    n_items: usize,
    n_records: usize,
    bucket_ends: Vec<i64>,
    options: BuildOptions,
    user_ids: Vec<i64>,
    item_ids: Vec<i64>,
}

impl LoggedDataset {
    pub fn build(
        records: Vec<InteractionRecord>,
        trust: Vec<TrustEdge>,
        n_users: usize,
        n_items: usize,
        options: BuildOptions,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptySequence("interaction records"));
        }
        let min_ts = records.iter().map(|r| r.timestamp).min().expect("non-empty");
        let max_ts = records.iter().map(|r| r.timestamp).max().expect("non-empty");
        let width = options.bucket_width.unwrap_or_else(|| Buckets::default_width(min_ts, max_ts));
        if width <= 0 {
            return Err(Error::Config(format!("bucket width {width} must be positive")));
        }
        let buckets = Buckets::from_width(min_ts, max_ts, width);
        Self::with_buckets(records, trust, n_users, n_items, buckets, options)
    }

    pub fn with_buckets(
        records: Vec<InteractionRecord>,
        trust: Vec<TrustEdge>,
        n_users: usize,
        n_items: usize,
        buckets: Buckets,
        options: BuildOptions,
    ) -> Result<Self> {
        for r in &records {
            if r.user >= n_users {
                return Err(Error::Lookup { kind: "user", id: r.user });
            }
            if r.item >= n_items {
                return Err(Error::Lookup { kind: "item", id: r.item });
            }
            if r.feedback > 1 {
                return Err(Error::Domain(format!("feedback {} not binary", r.feedback)));
            }
        }
        for e in &trust {
            for u in [e.truster, e.trustee] {
                if u >= n_users {
                    return Err(Error::Lookup { kind: "user", id: u });
                }
            }
        }
        let popularity = compute_popularity(&records, &buckets, n_items, options.smoothing);
        let social = snapshot_graph(&trust, &buckets, n_users, options.undirected, options.neighbor_cap);
        let mut user_records = vec![Vec::new(); n_users];
        for r in records {
            user_records[r.user].push(r);
        }
        for seq in &mut user_records {
            seq.sort_by_key(|r| r.timestamp);
        }
        Ok(Self {
            n_users,
            n_items,
            user_records,
            trust,
            buckets,
            popularity,
            social,
            options,
            user_ids: IdMap::identity(n_users),
            item_ids: IdMap::identity(n_items),
        })
    }

    /// Parses raw `interactions.csv` and optional `trust.csv` files.
    pub fn from_csv(
        interactions: impl AsRef<Path>,
        trust: Option<&Path>,
        threshold: f64,
        options: BuildOptions,
    ) -> Result<Self> {
        let parsed = parse_interactions(interactions, threshold)?;
        let edges = match trust {
            Some(p) => parse_trust(p, &parsed.users)?,
            None => Vec::new(),
        };
        let mut ds = Self::build(parsed.records, edges, parsed.users.len(), parsed.items.len(), options)?;
        ds.user_ids = parsed.users;
        ds.item_ids = parsed.items;
        Ok(ds)
    }

    pub fn num_records(&self) -> usize {
        self.user_records.iter().map(Vec::len).sum()
    }

    pub fn records(&self) -> impl Iterator<Item = &InteractionRecord> {
        self.user_records.iter().flatten()
    }

    pub fn bucket_of(&self, ts: i64) -> usize {
        self.buckets.bucket_of(ts)
    }

    pub fn last_bucket(&self) -> usize {
        self.buckets.len() - 1
    }

    /// Per-user temporal split: the first `floor(ratio * len)` records of each
    /// user go to train, the rest to test. Users with fewer than two records
    /// stay entirely in train. Bucket series are shared.
    pub fn split_train_test(&self, ratio: f64) -> Result<(Self, Self)> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::Config(format!("split ratio {ratio} outside [0, 1]")));
        }
        let mut train = self.clone();
        let mut test = self.clone();
        for (u, seq) in self.user_records.iter().enumerate() {
            let cut = if seq.len() < 2 {
                seq.len()
            } else {
                (ratio * seq.len() as f64).floor() as usize
            };
            train.user_records[u] = seq[..cut].to_vec();
            test.user_records[u] = seq[cut..].to_vec();
        }
        Ok((train, test))
    }

    /// Writes the canonical directory: `interactions.csv` with dense ids and
    /// binary ratings, `trust.csv` and `meta.json`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("interactions.csv"))?;
        w.write_record(["user", "item", "rating", "timestamp"])?;
        for r in self.records() {
            w.write_record([
                r.user.to_string(),
                r.item.to_string(),
                r.feedback.to_string(),
                r.timestamp.to_string(),
            ])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("trust.csv"))?;
        w.write_record(["truster", "trustee", "timestamp"])?;
        for e in &self.trust {
            w.write_record([e.truster.to_string(), e.trustee.to_string(), e.timestamp.to_string()])?;
        }
        w.flush()?;
        let meta = Meta {
            n_users: self.n_users,
            n_items: self.n_items,
            n_records: self.num_records(),
            bucket_ends: self.buckets.ends().to_vec(),
            options: self.options.clone(),
            user_ids: self.user_ids.originals().to_vec(),
            item_ids: self.item_ids.originals().to_vec(),
        };
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Reads a directory written by [`save_dir`](Self::save_dir).
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: Meta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
        let ids = |n: usize| IdMap::identity(n);
        let parsed = parse_interactions(dir.join("interactions.csv"), 1.0)?;
        // dense ids are kept as written, not re-densified
        let records: Vec<InteractionRecord> = parsed
            .records
            .iter()
            .map(|r| InteractionRecord {
                user: parsed.users.original(r.user).expect("mapped") as usize,
                item: parsed.items.original(r.item).expect("mapped") as usize,
                ..*r
            })
            .collect();
        if records.len() != meta.n_records {
            return Err(Error::Config(format!(
                "meta.json lists {} records, interactions.csv has {}",
                meta.n_records,
                records.len()
            )));
        }
        let trust_path = dir.join("trust.csv");
        let trust = if trust_path.exists() {
            parse_trust(&trust_path, &ids(meta.n_users))?
        } else {
            Vec::new()
        };
        let mut ds = Self::with_buckets(
            records,
            trust,
            meta.n_users,
            meta.n_items,
            Buckets::from_ends(meta.bucket_ends),
            meta.options,
        )?;
        ds.user_ids = IdMap::from_originals(meta.user_ids);
        ds.item_ids = IdMap::from_originals(meta.item_ids);
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(user: usize, item: usize, ts: i64) -> InteractionRecord {
        InteractionRecord { user, item, feedback: 1, timestamp: ts }
    }

    #[test]
    fn bucket_lookup() {
        let b = Buckets::from_width(0, 99, 10);
        assert_eq!(b.len(), 10);
        assert_eq!(b.bucket_of(0), 0);
        assert_eq!(b.bucket_of(9), 0);
        assert_eq!(b.bucket_of(10), 1);
        assert_eq!(b.bucket_of(1000), 9);
        assert_eq!(b.bucket_of(-5), 0);
    }

    #[test]
    fn split_ten_records() {
        let recs: Vec<_> = (0..10).map(|t| rec(0, t as usize % 3, t)).chain([rec(1, 0, 3)]).collect();
        let ds = LoggedDataset::build(recs, vec![], 2, 3, BuildOptions::default()).unwrap();
        let (train, test) = ds.split_train_test(0.8).unwrap();
        assert_eq!(train.user_records[0].len(), 8);
        assert_eq!(test.user_records[0].len(), 2);
        assert!(train.user_records[0].last().unwrap().timestamp < test.user_records[0][0].timestamp);
        assert_eq!(train.user_records[1].len(), 1);
        assert!(test.user_records[1].is_empty());
    }

    #[test]
    fn canonical_round_trip() {
        let recs = vec![rec(0, 1, 5), rec(1, 0, 7), rec(0, 2, 30)];
        let trust = vec![TrustEdge { truster: 0, trustee: 1, timestamp: 6 }];
        let ds = LoggedDataset::build(recs, trust, 3, 4, BuildOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save_dir(dir.path()).unwrap();
        let back = LoggedDataset::load_dir(dir.path()).unwrap();
        assert_eq!(back, ds);
        back.save_dir(dir.path()).unwrap();
        assert_eq!(LoggedDataset::load_dir(dir.path()).unwrap(), ds);
    }

    #[test]
    fn rejects_out_of_range_ids() {
        let err = LoggedDataset::build(vec![rec(0, 5, 0)], vec![], 1, 3, BuildOptions::default());
        assert!(matches!(err, Err(Error::Lookup { kind: "item", .. })));
    }
}
