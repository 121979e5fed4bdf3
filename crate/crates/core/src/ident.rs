//! Identifiability bench: data from a known latent process, a world model
//! fitted on it, and scores for how well its latents track the true ones.
//!
//! ```text
//! s^u_t = tanh(A s^u_{t-1} + B mean_{v in G_t(u)} phi_v)     s^u_0 = 0
//! y_t   ~ Bernoulli(sigmoid(w_a . s^u_t + v_a . s^c + kappa (M z_t[a] - 1) + b))
//! z_t   = softmax(l_t),  l_t = 0.7 l_{t-1} + eps
//! ```
//!
//! One `G` regime per time bucket; actions are uniform. `b` is calibrated by
//! bisection so the mean acceptance probability is one half.

use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::logistic;
use crate::data::{Buckets, BuildOptions, InteractionRecord, LoggedDataset, PopularitySeries, SocialGraphSeries};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, Rng64};
use crate::world_model::{logged_sequences, ElboTrainConfig, ElboTrainer, Globals, WorldModel, WorldModelConfig};

/// Largest latent dimension scored by exhaustive assignment.
pub const MAX_ASSIGNMENT_DIM: usize = 6;
/// Folds of the block regression.
pub const BLOCK_FOLDS: usize = 5;
const RIDGE: f64 = 1e-6;
const NEIGHBORS: usize = 4;
const MAX_RESAMPLES: u64 = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdentConfig {
    pub n_u: usize,
    pub n_c: usize,
    pub regimes: usize,
    pub users: usize,
    pub items: usize,
    /// Interactions per user.
    pub steps: usize,
    pub dim: usize,
    pub train_steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub window: usize,
    pub dropout: f64,
}

impl Default for IdentConfig {
    fn default() -> Self {
        Self {
            n_u: 2,
            n_c: 2,
            regimes: 5,
            users: 120,
            items: 20,
            steps: 40,
            dim: 16,
            train_steps: 1200,
            lr: 0.01,
            batch: 16,
            window: 40,
            dropout: 0.2,
        }
    }
}

impl IdentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_u == 0 || self.n_c == 0 || self.n_u > MAX_ASSIGNMENT_DIM {
            return Err(Error::Config(format!("latent dims ({}, {}) outside 1..={MAX_ASSIGNMENT_DIM}", self.n_u, self.n_c)));
        }
        if self.regimes == 0 || self.items == 0 || self.dim < 2 {
            return Err(Error::Config("regimes, items and dim must be positive".into()));
        }
        if self.users <= NEIGHBORS {
            return Err(Error::Config(format!("need more than {NEIGHBORS} users")));
        }
        if self.steps < 2 {
            return Err(Error::Config("need at least 2 steps per user".into()));
        }
        Ok(())
    }
}

/// Ground-truth latents of a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct TrueLatents {
    /// `[user][t]` -> `s^u_t`; empty for users without records.
    pub user_states: Vec<Vec<Vec<f64>>>,
    /// `[user]` -> `s^c`.
    pub context: Vec<Vec<f64>>,
}

/// A sampled instance of the latent process.
#[derive(Clone, Debug)]
pub struct SyntheticProcess {
    pub n_u: usize,
    pub n_c: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub regimes: usize,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    phi: Vec<Vec<f64>>,
    context: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    kappa: f64,
    pub bias: f64,
    /// `[regime][user]` neighbour lists.
    pub graphs: Vec<Vec<Vec<usize>>>,
    /// `[regime]` popularity vectors.
    pub popularity: Vec<Vec<f64>>,
}

fn normal_vec(rng: &mut Rng64, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, x)).collect()
}

fn softmax(l: &[f64]) -> Vec<f64> {
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

impl SyntheticProcess {
    /// Samples mixing parameters, regime graphs and popularity; resamples
    /// (up to a fixed number of times) when the outputs are degenerate.
    pub fn sample(cfg: &IdentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        for attempt in 0..MAX_RESAMPLES {
            let p = Self::draw(cfg, derive_seed(seed, &[0x1de7, attempt]));
            if let Some(p) = p.calibrated() {
                return Ok(p);
            }
        }
        Err(Error::Domain(format!("degenerate latent process after {MAX_RESAMPLES} draws")))
    }

    fn draw(cfg: &IdentConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[]);
        let (n_u, n_c) = (cfg.n_u, cfg.n_c);
        // diagonal-dominant B keeps rho invertible in the neighbour signal
        let a: Vec<Vec<f64>> = (0..n_u).map(|i| (0..n_u).map(|j| if i == j { 0.3 } else { 0.0 } + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect()).collect();
        let b: Vec<Vec<f64>> = (0..n_u).map(|i| (0..n_u).map(|j| if i == j { 1.0 } else { 0.0 } + 0.2 * rng.sample::<f64, _>(StandardNormal)).collect()).collect();
        let phi = (0..cfg.users).map(|_| normal_vec(&mut rng, n_u, 2.0)).collect();
        let context = (0..cfg.users).map(|_| normal_vec(&mut rng, n_c, 1.0)).collect();
        let w = (0..cfg.items).map(|_| normal_vec(&mut rng, n_u, 3.0)).collect();
        let v = (0..cfg.items).map(|_| normal_vec(&mut rng, n_c, 0.5)).collect();
        let graphs = (0..cfg.regimes)
            .map(|_| {
                (0..cfg.users)
                    .map(|u| {
                        let mut picks: Vec<usize> = sample_indices(&mut rng, cfg.users - 1, NEIGHBORS)
                            .into_iter()
                            .map(|x| if x >= u { x + 1 } else { x })
                            .collect();
                        picks.sort_unstable();
                        picks
                    })
                    .collect()
            })
            .collect();
        let mut logits = normal_vec(&mut rng, cfg.items, 1.0);
        let mut popularity = Vec::with_capacity(cfg.regimes);
        for _ in 0..cfg.regimes {
            popularity.push(softmax(&logits));
            let eps = normal_vec(&mut rng, cfg.items, 0.7);
            logits = logits.iter().zip(eps).map(|(l, e)| 0.7 * l + e).collect();
        }
        Self {
            n_u,
            n_c,
            n_users: cfg.users,
            n_items: cfg.items,
            regimes: cfg.regimes,
            a,
            b,
            phi,
            context,
            w,
            v,
            kappa: 0.5,
            bias: 0.0,
            graphs,
            popularity,
        }
    }

    /// Sets `bias` so the mean acceptance over every (user, step, item) of a
    /// probe rollout is one half; `None` when the logits do not vary.
    fn calibrated(mut self) -> Option<Self> {
        let probe_steps = 2 * self.regimes.max(2);
        let mut logits = Vec::new();
        for u in 0..self.n_users {
            for (t, s) in self.user_path(u, probe_steps).iter().enumerate() {
                let r = self.regime_of(t, probe_steps);
                for a in 0..self.n_items {
                    logits.push(self.logit(u, s, r, a));
                }
            }
        }
        let n = logits.len() as f64;
        let mean = logits.iter().sum::<f64>() / n;
        let var = logits.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        if !var.is_finite() || var < 1e-12 {
            return None;
        }
        let rate = |b: f64| logits.iter().map(|x| logistic(x + b)).sum::<f64>() / n;
        let (mut lo, mut hi) = (-50.0, 50.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if rate(mid) < 0.5 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        self.bias = 0.5 * (lo + hi);
        Some(self)
    }

    pub fn regime_of(&self, t: usize, steps: usize) -> usize {
        (t * self.regimes / steps).min(self.regimes - 1)
    }

    /// `s^u_1..s^u_T` for one user.
    pub fn user_path(&self, user: usize, steps: usize) -> Vec<Vec<f64>> {
        let mut s = vec![0.0; self.n_u];
        (0..steps)
            .map(|t| {
                let nb = &self.graphs[self.regime_of(t, steps)][user];
                let mut m = vec![0.0; self.n_u];
                for &v in nb {
                    for (acc, x) in m.iter_mut().zip(&self.phi[v]) {
                        *acc += x / nb.len() as f64;
                    }
                }
                let pre: Vec<f64> = matvec(&self.a, &s).iter().zip(matvec(&self.b, &m)).map(|(x, y)| x + y).collect();
                s = pre.iter().map(|x| x.tanh()).collect();
                s.clone()
            })
            .collect()
    }

    /// Logit of `g` before the Bernoulli draw.
    pub fn logit(&self, user: usize, state: &[f64], regime: usize, item: usize) -> f64 {
        let z = self.popularity[regime][item] * self.n_items as f64 - 1.0;
        dot(&self.w[item], state) + dot(&self.v[item], &self.context[user]) + self.kappa * z + self.bias
    }

    /// Numerical injectivity of `g` in its latents: `trials` random pairs of
    /// distinct latents give distinct logit vectors over the catalogue.
    pub fn is_injective(&self, trials: usize, seed: u64) -> bool {
        let mut rng = rng_for(seed, &[0x1417]);
        let out = |s: &[f64], c: &[f64]| -> Vec<f64> {
            (0..self.n_items).map(|a| dot(&self.w[a], s) + dot(&self.v[a], c)).collect()
        };
        (0..trials).all(|_| {
            let (s1, c1) = (normal_vec(&mut rng, self.n_u, 1.0), normal_vec(&mut rng, self.n_c, 1.0));
            let (s2, c2) = (normal_vec(&mut rng, self.n_u, 1.0), normal_vec(&mut rng, self.n_c, 1.0));
            let (o1, o2) = (out(&s1, &c1), out(&s2, &c2));
            o1.iter().zip(&o2).any(|(x, y)| (x - y).abs() > 1e-9)
        })
    }

    /// Rolls the first `users` users for `steps` steps with uniform actions.
    /// Step `t` of every user falls in bucket `regime_of(t)`, whose graph and
    /// popularity replace the ones derived from the records.
    pub fn generate(&self, users: usize, steps: usize, seed: u64) -> Result<(LoggedDataset, TrueLatents)> {
        if steps < 2 {
            return Err(Error::Contract(format!("need at least 2 steps, got {steps}")));
        }
        if users == 0 || users > self.n_users {
            return Err(Error::Contract(format!("users {users} outside 1..={}", self.n_users)));
        }
        let mut rng = rng_for(seed, &[0x9e7]);
        let mut records = Vec::with_capacity(users * steps);
        let mut user_states = vec![Vec::new(); self.n_users];
        for (u, states) in user_states.iter_mut().enumerate().take(users) {
            *states = self.user_path(u, steps);
            for (t, s) in states.iter().enumerate() {
                let r = self.regime_of(t, steps);
                let item = rng.random_range(0..self.n_items);
                let p = logistic(self.logit(u, s, r, item));
                records.push(InteractionRecord {
                    user: u,
                    item,
                    feedback: u8::from(rng.random::<f64>() < p),
                    timestamp: (r * steps + t) as i64,
                });
            }
        }
        let ends = (0..self.regimes).map(|r| ((r + 1) * steps) as i64 - 1).collect();
        let mut ds = LoggedDataset::with_buckets(records, Vec::new(), self.n_users, self.n_items, Buckets::from_ends(ends), BuildOptions::default())?;
        ds.social = SocialGraphSeries { buckets: self.graphs.clone() };
        ds.popularity = PopularitySeries { buckets: self.popularity.clone() };
        Ok((ds, TrueLatents { user_states, context: self.context.clone() }))
    }
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 1e-24 || syy <= 1e-24 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn columns(rows: &[Vec<f64>], dim: usize) -> Result<Vec<Vec<f64>>> {
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Dimension {
            context: "latent rows",
            expected: vec![dim],
            got: rows.iter().map(Vec::len).find(|&l| l != dim).into_iter().collect(),
        });
    }
    Ok((0..dim).map(|j| rows.iter().map(|r| r[j]).collect()).collect())
}

/// Mean absolute Pearson correlation under the best one-to-one matching of
/// estimated to true components. Rows are samples.
pub fn mcc(truth: &[Vec<f64>], estimate: &[Vec<f64>]) -> Result<f64> {
    if truth.len() != estimate.len() || truth.len() < 2 {
        return Err(Error::Contract(format!("need matching sample counts >= 2, got {} and {}", truth.len(), estimate.len())));
    }
    let d = truth[0].len();
    if d == 0 || d > MAX_ASSIGNMENT_DIM {
        return Err(Error::Contract(format!("latent dim {d} outside 1..={MAX_ASSIGNMENT_DIM}")));
    }
    let (tc, ec) = (columns(truth, d)?, columns(estimate, d)?);
    let corr: Vec<Vec<f64>> = tc.iter().map(|t| ec.iter().map(|e| pearson(t, e).abs()).collect()).collect();
    let best = permutations(d)
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| corr[i][j]).sum::<f64>())
        .fold(0.0, f64::max);
    Ok(best / d as f64)
}

fn poly2(x: &[f64]) -> Vec<f64> {
    let mut f = Vec::with_capacity(1 + x.len() + x.len() * (x.len() + 1) / 2);
    f.push(1.0);
    f.extend_from_slice(x);
    for i in 0..x.len() {
        for j in i..x.len() {
            f.push(x[i] * x[j]);
        }
    }
    f
}

/// Cross-validated R² of predicting `truth` from a degree-2 polynomial ridge
/// regression on `estimate`, averaged over output dimensions and clamped to
/// `[0, 1]`. Fold of row `i` is `i % folds`.
pub fn block_r2(truth: &[Vec<f64>], estimate: &[Vec<f64>], folds: usize) -> Result<f64> {
    let n = truth.len();
    if n != estimate.len() || folds < 2 || n < 2 * folds {
        return Err(Error::Contract(format!("block regression needs matching rows >= {} ({n} and {})", 2 * folds, estimate.len())));
    }
    let dy = truth[0].len();
    let de = estimate[0].len();
    columns(truth, dy)?;
    columns(estimate, de)?;
    // features standardised on all rows; only affects ridge conditioning
    let feats: Vec<Vec<f64>> = estimate.iter().map(|r| poly2(r)).collect();
    let p = feats[0].len();
    let mut scale = vec![1.0; p];
    for (j, s) in scale.iter_mut().enumerate().skip(1) {
        let col: Vec<f64> = feats.iter().map(|f| f[j]).collect();
        let m = col.iter().sum::<f64>() / n as f64;
        let sd = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        *s = if sd > 1e-12 { sd } else { 1.0 };
    }
    let mut sse = vec![0.0; dy];
    for k in 0..folds {
        let train: Vec<usize> = (0..n).filter(|i| i % folds != k).collect();
        let x = DMatrix::from_fn(train.len(), p, |r, c| feats[train[r]][c] / scale[c]);
        let y = DMatrix::from_fn(train.len(), dy, |r, c| truth[train[r]][c]);
        let gram = x.transpose() * &x + DMatrix::identity(p, p) * RIDGE * train.len() as f64;
        let rhs = x.transpose() * &y;
        let coef = gram
            .cholesky()
            .ok_or_else(|| Error::Domain("ridge system not positive definite".into()))?
            .solve(&rhs);
        for i in (0..n).filter(|i| i % folds == k) {
            let xi = DMatrix::from_fn(1, p, |_, c| feats[i][c] / scale[c]);
            let pred = xi * &coef;
            for (c, e) in sse.iter_mut().enumerate() {
                *e += (truth[i][c] - pred[(0, c)]).powi(2);
            }
        }
    }
    let mut total = 0.0;
    for (c, e) in sse.iter().enumerate() {
        let m = truth.iter().map(|r| r[c]).sum::<f64>() / n as f64;
        let sst: f64 = truth.iter().map(|r| (r[c] - m).powi(2)).sum();
        total += if sst > 1e-24 { (1.0 - e / sst).clamp(0.0, 1.0) } else { 0.0 };
    }
    Ok(total / dy as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScores {
    pub mcc: f64,
    pub block_r2: f64,
}

/// Scores a world model's latents on a generated dataset: `s^u` per step via
/// the state fold, `s^c` per user as the mean posterior location over its
/// steps.
pub fn score_recovery(wm: &WorldModel, ds: &LoggedDataset, latents: &TrueLatents) -> Result<RecoveryScores> {
    let globals = Globals::of(ds);
    let seqs = logged_sequences(ds, wm.config.state_dim);
    let states = wm.fold_many(&globals, &seqs, None)?;
    let (mut true_s, mut est_s) = (Vec::new(), Vec::new());
    let (mut true_c, mut est_c) = (Vec::new(), Vec::new());
    for (seq, st) in seqs.iter().zip(&states) {
        let truth = &latents.user_states[seq.user];
        if truth.len() != st.len() {
            return Err(Error::Contract(format!("user {} has {} true states for {} steps", seq.user, truth.len(), st.len())));
        }
        true_s.extend(truth.iter().cloned());
        est_s.extend(st.iter().cloned());
        let mut mean = vec![0.0; wm.config.context_dim];
        for k in 1..seq.steps.len() {
            let post = wm.context_encode(&globals, seq.user, &seq.steps[k - 1], &st[k - 1], None)?;
            for (m, x) in mean.iter_mut().zip(&post.mu) {
                *m += x / (seq.steps.len() - 1) as f64;
            }
        }
        true_c.push(latents.context[seq.user].clone());
        est_c.push(mean);
    }
    Ok(RecoveryScores {
        mcc: mcc(&true_s, &est_s)?,
        block_r2: block_r2(&true_c, &est_c, BLOCK_FOLDS)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub seed: u64,
    pub regimes: usize,
    pub trained: RecoveryScores,
    /// Same architecture and initialisation, no training.
    pub baseline: RecoveryScores,
    pub mcc_lift: f64,
    pub final_loss: f64,
}

/// Generates train and held-out rollouts, fits a world model with
/// `state_dim = n_u` and `context_dim = n_c`, and scores it against its own
/// initialisation on the held-out rollouts.
pub fn run_seed(cfg: &IdentConfig, seed: u64) -> Result<RecoveryReport> {
    let process = SyntheticProcess::sample(cfg, seed)?;
    let (train, _) = process.generate(cfg.users, cfg.steps, derive_seed(seed, &[1]))?;
    let (held_out, latents) = process.generate(cfg.users, cfg.steps, derive_seed(seed, &[2]))?;
    let wm_cfg = WorldModelConfig {
        n_users: cfg.users,
        n_items: cfg.items,
        dim: cfg.dim,
        state_dim: cfg.n_u,
        context_dim: cfg.n_c,
        dropout: cfg.dropout,
    };
    let mut wm = WorldModel::new(wm_cfg, derive_seed(seed, &[3]))?;
    let baseline = score_recovery(&wm, &held_out, &latents)?;
    let mut trainer = ElboTrainer::new(ElboTrainConfig {
        lr: cfg.lr,
        batch: cfg.batch,
        window: cfg.window,
        ..ElboTrainConfig::default()
    });
    let globals = Globals::of(&train);
    let seqs = logged_sequences(&train, cfg.n_u);
    let mut rng = rng_for(seed, &[4]);
    let curve = trainer.train(&mut wm, &globals, &seqs, cfg.train_steps, &mut rng)?;
    let trained = score_recovery(&wm, &held_out, &latents)?;
    let tail = &curve[curve.len().saturating_sub(20)..];
    Ok(RecoveryReport {
        seed,
        regimes: cfg.regimes,
        trained,
        baseline,
        mcc_lift: trained.mcc - baseline.mcc,
        final_loss: if tail.is_empty() { f64::NAN } else { tail.iter().sum::<f64>() / tail.len() as f64 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: IdentConfig,
    pub per_seed: Vec<RecoveryReport>,
    pub mean_mcc: f64,
    pub mean_baseline_mcc: f64,
    pub mean_lift: f64,
    pub mean_block_r2: f64,
    pub mean_baseline_block_r2: f64,
    pub wall_clock_secs: f64,
}

impl BenchReport {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// [`run_seed`] for each seed in parallel.
pub fn run_bench(cfg: &IdentConfig, seeds: &[u64]) -> Result<BenchReport> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("no seeds".into()));
    }
    let start = Instant::now();
    let per_seed = seeds.par_iter().map(|&s| run_seed(cfg, s)).collect::<Result<Vec<_>>>()?;
    let mean = |f: &dyn Fn(&RecoveryReport) -> f64| per_seed.iter().map(f).sum::<f64>() / per_seed.len() as f64;
    Ok(BenchReport {
        config: cfg.clone(),
        mean_mcc: mean(&|r| r.trained.mcc),
        mean_baseline_mcc: mean(&|r| r.baseline.mcc),
        mean_lift: mean(&|r| r.mcc_lift),
        mean_block_r2: mean(&|r| r.trained.block_r2),
        mean_baseline_block_r2: mean(&|r| r.baseline.block_r2),
        per_seed,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> IdentConfig {
        IdentConfig {
            users: 20,
            items: 10,
            steps: 10,
            ..IdentConfig::default()
        }
    }

    #[test]
    fn two_steps_one_user() {
        let p = SyntheticProcess::sample(&small(), 1).unwrap();
        let (ds, lat) = p.generate(1, 2, 9).unwrap();
        assert_eq!(ds.num_records(), 2);
        assert_eq!(lat.user_states[0].len(), 2);
        assert_eq!(lat.context[0].len(), 2);
        assert!(p.generate(1, 1, 9).is_err());
    }

    #[test]
    fn generation_is_seeded() {
        let p = SyntheticProcess::sample(&small(), 4).unwrap();
        let q = SyntheticProcess::sample(&small(), 4).unwrap();
        let (a, la) = p.generate(20, 10, 5).unwrap();
        let (b, lb) = q.generate(20, 10, 5).unwrap();
        assert_eq!(a.user_records, b.user_records);
        assert_eq!(la, lb);
    }

    #[test]
    fn buckets_follow_regimes() {
        let p = SyntheticProcess::sample(&small(), 2).unwrap();
        let (ds, _) = p.generate(3, 10, 1).unwrap();
        let buckets: Vec<usize> = ds.user_records[0].iter().map(|r| ds.bucket_of(r.timestamp)).collect();
        assert_eq!(buckets, (0..10).map(|t| p.regime_of(t, 10)).collect::<Vec<_>>());
        assert_eq!(ds.social.buckets, p.graphs);
    }

    #[test]
    fn g_is_injective_in_latents() {
        assert!(SyntheticProcess::sample(&small(), 3).unwrap().is_injective(200, 0));
    }

    #[test]
    fn permutations_are_complete() {
        let mut p = permutations(3);
        p.sort();
        p.dedup();
        assert_eq!(p.len(), 6);
    }

    #[test]
    fn oversized_assignment_rejected() {
        let rows = vec![vec![0.0; 7]; 4];
        assert!(mcc(&rows, &rows).is_err());
    }
}
