//! Matrix-factorisation ground truth with interest decay on repeats.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::logistic;
use crate::data::LoggedDataset;
use crate::error::{Error, Result};
use crate::rng::{rng_for, Rng64};

pub const DEFAULT_ALPHA: f64 = 0.9;
pub const DEFAULT_HORIZON: usize = 32;
pub const DEFAULT_RANK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub rank: usize,
    pub epochs: usize,
    pub lr: f64,
    pub negatives_per_positive: usize,
    pub l2: f64,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            rank: DEFAULT_RANK,
            epochs: 40,
            lr: 0.05,
            negatives_per_positive: 4,
            l2: 1e-3,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

/// Rank-`H` user and item embeddings, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MfModel {
    pub n_users: usize,
    pub n_items: usize,
    pub rank: usize,
    pub user_emb: Vec<f64>,
    pub item_emb: Vec<f64>,
}

impl MfModel {
    pub fn init(n_users: usize, n_items: usize, rank: usize, scale: f64, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[0x3f]);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect() };
        let user_emb = draw(n_users * rank);
        let item_emb = draw(n_items * rank);
        Self {
            n_users,
            n_items,
            rank,
            user_emb,
            item_emb,
        }
    }

    pub fn from_embeddings(n_users: usize, n_items: usize, rank: usize, user_emb: Vec<f64>, item_emb: Vec<f64>) -> Result<Self> {
        if user_emb.len() != n_users * rank {
            return Err(Error::dim("user embeddings", &[n_users, rank], &[user_emb.len()]));
        }
        if item_emb.len() != n_items * rank {
            return Err(Error::dim("item embeddings", &[n_items, rank], &[item_emb.len()]));
        }
        if !user_emb.iter().chain(&item_emb).all(|v| v.is_finite()) {
            return Err(Error::Domain("non-finite embedding".into()));
        }
        Ok(Self {
            n_users,
            n_items,
            rank,
            user_emb,
            item_emb,
        })
    }

    fn check(&self, user: usize, item: usize) -> Result<()> {
        if user >= self.n_users {
            return Err(Error::Lookup { kind: "user", id: user });
        }
        if item >= self.n_items {
            return Err(Error::Lookup { kind: "item", id: item });
        }
        Ok(())
    }

    pub fn user(&self, u: usize) -> &[f64] {
        &self.user_emb[u * self.rank..(u + 1) * self.rank]
    }

    pub fn item(&self, i: usize) -> &[f64] {
        &self.item_emb[i * self.rank..(i + 1) * self.rank]
    }

    /// `u_g . a_g`
    pub fn score(&self, user: usize, item: usize) -> Result<f64> {
        self.check(user, item)?;
        Ok(self.user(user).iter().zip(self.item(item)).map(|(a, b)| a * b).sum())
    }

    /// Undecayed acceptance `sigmoid(u_g . a_g)`.
    pub fn base_probability(&self, user: usize, item: usize) -> Result<f64> {
        Ok(logistic(self.score(user, item)?))
    }

    /// Probability that a positive pair outranks a negative pair.
    pub fn auc(&self, positives: &[(usize, usize)], negatives: &[(usize, usize)]) -> Result<f64> {
        if positives.is_empty() || negatives.is_empty() {
            return Err(Error::Fit("auc needs positives and negatives".into()));
        }
        let pos: Vec<f64> = positives.iter().map(|&(u, i)| self.score(u, i)).collect::<Result<_>>()?;
        let neg: Vec<f64> = negatives.iter().map(|&(u, i)| self.score(u, i)).collect::<Result<_>>()?;
        let mut wins = 0.0;
        for p in &pos {
            for n in &neg {
                wins += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        Ok(wins / (pos.len() * neg.len()) as f64)
    }

    pub fn save(&self, dir: impl AsRef<Path>, alpha: f64, horizon: usize, fit: Option<&FitConfig>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let meta = EnvFile {
            version: 1,
            n_users: self.n_users,
            n_items: self.n_items,
            rank: self.rank,
            alpha,
            horizon,
            user_embeddings: "user_embeddings.bin".into(),
            item_embeddings: "item_embeddings.bin".into(),
            fit: fit.cloned(),
        };
        write_f64s(&dir.join(&meta.user_embeddings), &self.user_emb)?;
        write_f64s(&dir.join(&meta.item_embeddings), &self.item_emb)?;
        std::fs::write(dir.join("env.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Loads a model and returns it with the stored `alpha` and horizon.
    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, f64, usize)> {
        let dir = dir.as_ref();
        let meta: EnvFile = serde_json::from_str(&std::fs::read_to_string(dir.join("env.json"))?)?;
        if meta.version != 1 {
            return Err(Error::Checkpoint(format!("unsupported env.json version {}", meta.version)));
        }
        let users = read_f64s(&dir.join(&meta.user_embeddings))?;
        let items = read_f64s(&dir.join(&meta.item_embeddings))?;
        let model = Self::from_embeddings(meta.n_users, meta.n_items, meta.rank, users, items)?;
        Ok((model, meta.alpha, meta.horizon))
    }
}

#[derive(Serialize, Deserialize)]
struct EnvFile {
    version: u32,
    n_users: usize,
    n_items: usize,
    rank: usize,
    alpha: f64,
    horizon: usize,
    user_embeddings: String,
    item_embeddings: String,
    fit: Option<FitConfig>,
}

fn write_f64s(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!("{} is not a whole number of f64 values", path.display())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Logistic MF by SGD. Observed positives and negatives are used as labelled
/// pairs, plus `negatives_per_positive` uniformly drawn items per positive
/// labelled 0.
pub fn fit_ground_truth(train: &LoggedDataset, cfg: &FitConfig) -> Result<MfModel> {
    if cfg.rank == 0 {
        return Err(Error::Config("rank must be at least 1".into()));
    }
    let observed: Vec<(usize, usize, f64)> = train
        .records()
        .map(|r| (r.user, r.item, f64::from(r.feedback)))
        .collect();
    if observed.is_empty() {
        return Err(Error::Fit("empty dataset".into()));
    }
    let mut model = MfModel::init(train.n_users, train.n_items, cfg.rank, cfg.init_scale, cfg.seed);
    let mut rng = rng_for(cfg.seed, &[0x3f, 1]);
    let h = cfg.rank;
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for _ in 0..cfg.epochs {
        pairs.clear();
        for &(u, i, y) in &observed {
            pairs.push((u, i, y));
            if y > 0.5 {
                for _ in 0..cfg.negatives_per_positive {
                    pairs.push((u, rng.random_range(0..train.n_items), 0.0));
                }
            }
        }
        pairs.shuffle(&mut rng);
        for &(u, i, y) in &pairs {
            let (us, is) = (u * h, i * h);
            let dot: f64 = (0..h).map(|k| model.user_emb[us + k] * model.item_emb[is + k]).sum();
            let g = logistic(dot) - y;
            for k in 0..h {
                let pu = model.user_emb[us + k];
                let pi = model.item_emb[is + k];
                model.user_emb[us + k] -= cfg.lr * (g * pi + cfg.l2 * pu);
                model.item_emb[is + k] -= cfg.lr * (g * pu + cfg.l2 * pi);
            }
        }
    }
    if !model.user_emb.iter().chain(&model.item_emb).all(|v| v.is_finite()) {
        return Err(Error::Fit("embeddings diverged".into()));
    }
    Ok(model)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub feedback: u8,
    pub accept_probability: f64,
}

/// One interaction session against a shared ground truth. Exposure counters,
/// step counters and the sampling rng are owned by the session.
#[derive(Clone, Debug)]
pub struct GroundTruthEnv {
    model: Arc<MfModel>,
    alpha: f64,
    horizon: usize,
    counts: HashMap<(usize, usize), u32>,
    steps: HashMap<usize, usize>,
    rng: Rng64,
}

impl GroundTruthEnv {
    pub fn new(model: Arc<MfModel>, alpha: f64, horizon: usize, seed: u64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("alpha {alpha} outside (0, 1]")));
        }
        Ok(Self {
            model,
            alpha,
            horizon,
            counts: HashMap::new(),
            steps: HashMap::new(),
            rng: rng_for(seed, &[0xe7]),
        })
    }

    pub fn model(&self) -> &Arc<MfModel> {
        &self.model
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn exposure_count(&self, user: usize, item: usize) -> u32 {
        self.counts.get(&(user, item)).copied().unwrap_or(0)
    }

    pub fn steps_taken(&self, user: usize) -> usize {
        self.steps.get(&user).copied().unwrap_or(0)
    }

    /// `sigmoid(u_g . a_g) * alpha^c`; does not touch any counter.
    pub fn accept_probability(&self, user: usize, item: usize) -> Result<f64> {
        let base = self.model.base_probability(user, item)?;
        Ok(base * self.alpha.powi(self.exposure_count(user, item) as i32))
    }

    pub fn step(&mut self, user: usize, item: usize) -> Result<StepResult> {
        let p = self.accept_probability(user, item)?;
        let taken = self.steps_taken(user);
        if taken >= self.horizon {
            return Err(Error::EpisodeOver {
                user,
                horizon: self.horizon,
            });
        }
        let feedback = u8::from(self.rng.random::<f64>() < p);
        *self.counts.entry((user, item)).or_insert(0) += 1;
        self.steps.insert(user, taken + 1);
        Ok(StepResult {
            feedback,
            accept_probability: p,
        })
    }

    pub fn reset(&mut self, user: usize) {
        self.counts.retain(|&(u, _), _| u != user);
        self.steps.remove(&user);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BuildOptions, InteractionRecord};

    fn toy(u: Vec<f64>, a: Vec<f64>, rank: usize) -> Arc<MfModel> {
        let (n, m) = (u.len() / rank, a.len() / rank);
        Arc::new(MfModel::from_embeddings(n, m, rank, u, a).unwrap())
    }

    #[test]
    fn orthogonal_pair_decays_twice() {
        let model = toy(vec![1.0, 0.0], vec![0.0, 1.0], 2);
        let mut env = GroundTruthEnv::new(model, 0.9, 10, 1).unwrap();
        assert_eq!(env.accept_probability(0, 0).unwrap(), 0.5);
        env.step(0, 0).unwrap();
        env.step(0, 0).unwrap();
        assert!((env.accept_probability(0, 0).unwrap() - 0.405).abs() < 1e-15);
    }

    #[test]
    fn second_step_is_alpha_times_first() {
        let model = toy(vec![0.7], vec![1.3], 1);
        let mut env = GroundTruthEnv::new(model, 0.9, 10, 3).unwrap();
        let a = env.step(0, 0).unwrap().accept_probability;
        let b = env.step(0, 0).unwrap().accept_probability;
        assert_eq!(b, 0.9 * a);
    }

    #[test]
    fn certain_and_impossible_feedback() {
        let model = toy(vec![1.0], vec![100.0, -100.0], 1);
        let mut env = GroundTruthEnv::new(model, 1.0, 2000, 5).unwrap();
        assert_eq!(env.step(0, 0).unwrap().feedback, 1);
        let hits: u32 = (0..1000).map(|_| u32::from(env.step(0, 1).unwrap().feedback)).sum();
        assert!(f64::from(hits) / 1000.0 < 0.01);
    }

    #[test]
    fn horizon_and_reset() {
        let model = toy(vec![0.0, 0.0], vec![0.0], 1);
        let mut env = GroundTruthEnv::new(model, 0.9, 2, 0).unwrap();
        env.step(0, 0).unwrap();
        env.step(1, 0).unwrap();
        env.step(0, 0).unwrap();
        assert!(matches!(env.step(0, 0), Err(Error::EpisodeOver { .. })));
        env.reset(0);
        env.reset(0);
        assert_eq!(env.accept_probability(0, 0).unwrap(), 0.5);
        assert_eq!(env.exposure_count(1, 0), 1);
        assert!(env.step(0, 0).is_ok());
    }

    #[test]
    fn unknown_ids_are_lookup_errors() {
        let env = GroundTruthEnv::new(toy(vec![0.0], vec![0.0], 1), 0.9, 2, 0).unwrap();
        assert!(matches!(env.accept_probability(3, 0), Err(Error::Lookup { kind: "user", .. })));
        assert!(matches!(env.accept_probability(0, 3), Err(Error::Lookup { kind: "item", .. })));
    }

    fn two_item_set() -> LoggedDataset {
        let mut recs = Vec::new();
        for t in 0..20 {
            recs.push(InteractionRecord { user: 0, item: 0, feedback: 1, timestamp: 2 * t });
            recs.push(InteractionRecord { user: 0, item: 1, feedback: 0, timestamp: 2 * t + 1 });
        }
        LoggedDataset::build(recs, vec![], 1, 2, BuildOptions::default()).unwrap()
    }

    #[test]
    fn fit_ranks_liked_item_first() {
        let ds = two_item_set();
        let cfg = FitConfig { rank: 4, epochs: 30, ..FitConfig::default() };
        let m = fit_ground_truth(&ds, &cfg).unwrap();
        assert!(m.base_probability(0, 0).unwrap() > m.base_probability(0, 1).unwrap());
    }

    #[test]
    fn zero_epochs_keep_init_and_seed_determinism() {
        let ds = two_item_set();
        let cfg = FitConfig { rank: 3, epochs: 0, seed: 9, ..FitConfig::default() };
        let m = fit_ground_truth(&ds, &cfg).unwrap();
        assert_eq!(m, MfModel::init(1, 2, 3, cfg.init_scale, 9));
        let cfg = FitConfig { epochs: 5, ..cfg };
        assert_eq!(fit_ground_truth(&ds, &cfg).unwrap(), fit_ground_truth(&ds, &cfg).unwrap());
    }

    #[test]
    fn persistence_round_trip() {
        let m = MfModel::init(3, 4, 2, 0.5, 1);
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path(), 0.8, 16, None).unwrap();
        let (back, alpha, horizon) = MfModel::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!((alpha, horizon), (0.8, 16));
    }
}
