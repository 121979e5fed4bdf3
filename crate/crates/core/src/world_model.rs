//! Debiased causal world model: recursive user state `f_s`, context posterior
//! `f_c`, feedback predictor `f_y`, the negative ELBO and the Monte-Carlo
//! interventional feedback estimate used as the policy reward.
//!
//! Wiring:
//!
//! ```text
//! f_s: neighbours -> attention -> (+FFN) -> mean pool = n_s
//!      [item_emb | pop_proj(feat) | n_s] -> Linear -> LayerNorm -> (+FFN) -> GRU(., s_{t-1}) = s_t
//! f_c: neighbours -> attention -> mean pool = n_c
//!      [n_c | item_emb | feat | y | s_{t-1}] -> FFN -> LayerNorm -> (mu head, softplus sigma head)
//! f_y: [pop_proj(feat) | item_emb | s | s^c or 0] -> Linear -> tanh -> Linear = logit
//! ```

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{logistic, Graph, NodeId, Segment};
use crate::data::{LoggedDataset, PopularitySeries, SocialGraphSeries};
use crate::error::{Error, Result};
use crate::layers::{uniform_init, Dropout, FeedForward, LayerNorm, Linear, SelfAttention};
use crate::optim::Adam;
use crate::params::{ParamId, ParamStore};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::Tensor;

/// Floor added to the softplus scale head.
pub const SIGMA_FLOOR: f64 = 1e-4;
/// Monte-Carlo draws of `s^c` in [`WorldModel::debiased_feedback`] during policy training.
pub const DEFAULT_REWARD_SAMPLES: usize = 8;
/// Popularity features per (bucket, item).
pub const POP_FEATURES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldModelConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub dim: usize,
    pub state_dim: usize,
    pub context_dim: usize,
    pub dropout: f64,
}

impl WorldModelConfig {
    pub fn new(n_users: usize, n_items: usize, dim: usize) -> Self {
        Self {
            n_users,
            n_items,
            dim,
            state_dim: dim,
            context_dim: dim,
            dropout: 0.3,
        }
    }
}

/// Exogenous per-bucket attributes `w_t = {z_t, G_t}`.
#[derive(Clone, Copy)]
pub struct Globals<'a> {
    pub popularity: &'a PopularitySeries,
    pub social: &'a SocialGraphSeries,
}

impl<'a> Globals<'a> {
    pub fn of(ds: &'a LoggedDataset) -> Self {
        Self {
            popularity: &ds.popularity,
            social: &ds.social,
        }
    }

    pub fn n_buckets(&self) -> usize {
        self.popularity.len()
    }
}

/// `[M z_t[a], M mean(z_t), H(z_t) / ln M]`.
pub fn popularity_features(popularity: &PopularitySeries, bucket: usize, item: usize) -> [f64; POP_FEATURES] {
    let z = popularity.bucket(bucket);
    let m = z.len() as f64;
    let mean = z.iter().sum::<f64>() / m;
    [m * z[item], m * mean, popularity.normalized_entropy(bucket)]
}

/// One observed or simulated interaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub bucket: usize,
    pub item: usize,
    pub feedback: u8,
}

/// A user's interactions with the state before the first of them.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSequence {
    pub user: usize,
    pub init_state: Vec<f64>,
    pub steps: Vec<Step>,
}

/// A training window: predictions for `steps`, conditioned on `prev` and the
/// state `start_state` reached after `prev`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub user: usize,
    pub start_state: Vec<f64>,
    pub prev: Step,
    pub steps: Vec<Step>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextPosterior {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub sample: Vec<f64>,
}

/// Graph nodes of one negative-ELBO evaluation. Each term is averaged over
/// the valid positions of the batch; `total = kl + nll_current + nll_previous`.
#[derive(Clone, Copy, Debug)]
pub struct ElboNodes {
    pub total: NodeId,
    pub kl: NodeId,
    pub nll_current: NodeId,
    pub nll_previous: NodeId,
    pub positions: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub total: f64,
    pub kl: f64,
    pub nll_current: f64,
    pub nll_previous: f64,
}

/// Negative ELBO of one position from plain probabilities:
/// `KL(N(mu, sigma) || N(0, I)) - ln P(y_t) - ln P(y_{t-1})`.
pub fn negative_elbo(mu: &[f64], sigma: &[f64], p_current: f64, y_current: u8, p_previous: f64, y_previous: u8) -> Result<f64> {
    let kl = crate::layers::gaussian_kl_std(&Tensor::vector(mu.to_vec()), &Tensor::vector(sigma.to_vec()))?;
    let ll = |p: f64, y: u8| if y == 1 { p.ln() } else { (1.0 - p).ln() };
    Ok(kl - ll(p_current, y_current) - ll(p_previous, y_previous))
}

#[derive(Clone, Debug)]
struct Modules {
    item_emb: ParamId,
    neigh_emb: ParamId,
    pop_proj: Linear,
    s_attn: SelfAttention,
    s_ffn_tokens: FeedForward,
    s_in: Linear,
    s_ln: LayerNorm,
    s_ffn: FeedForward,
    gru: crate::layers::GruCell,
    c_attn: SelfAttention,
    c_ffn: FeedForward,
    c_ln: LayerNorm,
    c_mu: Linear,
    c_sigma: Linear,
    y_hidden: Linear,
    y_out: Linear,
}

/// Pooled neighbour summaries for the `(user, bucket)` pairs used in one graph.
struct Pools {
    s: NodeId,
    c: NodeId,
    index: HashMap<(usize, usize), usize>,
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub config: WorldModelConfig,
    pub params: ParamStore,
    m: Modules,
}

impl WorldModel {
    pub fn new(config: WorldModelConfig, seed: u64) -> Result<Self> {
        let WorldModelConfig {
            n_users,
            n_items,
            dim,
            state_dim,
            context_dim,
            ..
        } = config;
        if n_users == 0 || n_items == 0 || dim < 2 || state_dim == 0 || context_dim == 0 {
            return Err(Error::Config(format!("invalid world model sizes {config:?}")));
        }
        let mut rng = rng_for(seed, &[0x303d]);
        let mut store = ParamStore::new();
        let item_emb = store.add("item_emb", uniform_init(&mut rng, n_items, dim, dim))?;
        // last row is the null-neighbour token
        let neigh_emb = store.add("neigh_emb", uniform_init(&mut rng, n_users + 1, dim, dim))?;
        let pop_proj = Linear::new(&mut store, "pop_proj", POP_FEATURES, dim, true, &mut rng)?;
        let s_attn = SelfAttention::new(&mut store, "fs.attn", dim, &mut rng)?;
        let s_ffn_tokens = FeedForward::new(&mut store, "fs.ffn_tokens", dim, dim, dim, &mut rng)?;
        let s_in = Linear::new(&mut store, "fs.in", 3 * dim, dim, true, &mut rng)?;
        let s_ln = LayerNorm::new(&mut store, "fs.ln", dim)?;
        let s_ffn = FeedForward::new(&mut store, "fs.ffn", dim, dim, dim, &mut rng)?;
        let gru = crate::layers::GruCell::new(&mut store, "fs.gru", dim, state_dim, &mut rng)?;
        let c_attn = SelfAttention::new(&mut store, "fc.attn", dim, &mut rng)?;
        let c_in = dim + dim + POP_FEATURES + 1 + state_dim;
        let c_ffn = FeedForward::new(&mut store, "fc.ffn", c_in, dim, dim, &mut rng)?;
        let c_ln = LayerNorm::new(&mut store, "fc.ln", dim)?;
        let c_mu = Linear::new(&mut store, "fc.mu", dim, context_dim, true, &mut rng)?;
        let c_sigma = Linear::new(&mut store, "fc.sigma", dim, context_dim, true, &mut rng)?;
        let y_hidden = Linear::new(&mut store, "fy.hidden", 2 * dim + state_dim + context_dim, dim, true, &mut rng)?;
        let y_out = Linear::new(&mut store, "fy.out", dim, 1, true, &mut rng)?;
        Ok(Self {
            config,
            params: store,
            m: Modules {
                item_emb,
                neigh_emb,
                pop_proj,
                s_attn,
                s_ffn_tokens,
                s_in,
                s_ln,
                s_ffn,
                gru,
                c_attn,
                c_ffn,
                c_ln,
                c_mu,
                c_sigma,
                y_hidden,
                y_out,
            },
        })
    }

    pub fn state_dim(&self) -> usize {
        self.config.state_dim
    }

    pub fn zero_state(&self) -> Vec<f64> {
        vec![0.0; self.config.state_dim]
    }

    /// Writes `path` (parameters) and `path` with a `.json` extension (config).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.params.save(path)?;
        std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let config: WorldModelConfig = serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
        let mut wm = Self::new(config, 0)?;
        wm.params.load_values_from(path)?;
        Ok(wm)
    }

    fn check_ids(&self, globals: &Globals<'_>, user: usize, step: &Step) -> Result<()> {
        if user >= self.config.n_users {
            return Err(Error::Lookup { kind: "user", id: user });
        }
        if step.item >= self.config.n_items {
            return Err(Error::Lookup { kind: "item", id: step.item });
        }
        if step.bucket >= globals.n_buckets() {
            return Err(Error::Lookup { kind: "bucket", id: step.bucket });
        }
        if step.feedback > 1 {
            return Err(Error::Domain(format!("feedback {} not binary", step.feedback)));
        }
        Ok(())
    }

    fn pools(&self, g: &mut Graph, globals: &Globals<'_>, pairs: &[(usize, usize)], dropout: &mut Dropout<'_>) -> Result<Pools> {
        let mut index = HashMap::new();
        let mut uniq = Vec::new();
        for &p in pairs {
            index.entry(p).or_insert_with(|| {
                uniq.push(p);
                uniq.len() - 1
            });
        }
        let null = self.config.n_users;
        let mut tokens = Vec::new();
        let mut segs = Vec::with_capacity(uniq.len());
        for &(u, t) in &uniq {
            let nbrs = globals.social.neighbors(t, u);
            let start = tokens.len();
            if nbrs.is_empty() {
                tokens.push(null);
            } else {
                tokens.extend_from_slice(nbrs);
            }
            segs.push(Segment {
                start,
                len: tokens.len() - start,
            });
        }
        let table = g.param(&self.params, self.m.neigh_emb);
        let x = g.gather_rows(table, &tokens)?;
        let a = self.m.s_attn.forward_segments(g, &self.params, x, &segs)?;
        let f = self.m.s_ffn_tokens.forward(g, &self.params, a, dropout)?;
        let h = g.add(a, f)?;
        let s = g.segment_mean(h, &segs)?;
        let ac = self.m.c_attn.forward_segments(g, &self.params, x, &segs)?;
        let c = g.segment_mean(ac, &segs)?;
        Ok(Pools { s, c, index })
    }

    fn pop_input(&self, g: &mut Graph, globals: &Globals<'_>, steps: &[Step]) -> NodeId {
        let data: Vec<f64> = steps
            .iter()
            .flat_map(|s| popularity_features(globals.popularity, s.bucket, s.item))
            .collect();
        g.input(Tensor::matrix(steps.len(), POP_FEATURES, data))
    }

    fn pool_rows(&self, g: &mut Graph, pools: &Pools, pool: NodeId, users: &[usize], steps: &[Step]) -> Result<NodeId> {
        let idx: Vec<usize> = users
            .iter()
            .zip(steps)
            .map(|(&u, s)| pools.index[&(u, s.bucket)])
            .collect();
        g.gather_rows(pool, &idx)
    }

    fn items(&self, g: &mut Graph, steps: &[Step]) -> Result<NodeId> {
        let table = g.param(&self.params, self.m.item_emb);
        let idx: Vec<usize> = steps.iter().map(|s| s.item).collect();
        g.gather_rows(table, &idx)
    }

    /// `f_s` on a batch of rows.
    fn fs(&self, g: &mut Graph, globals: &Globals<'_>, pools: &Pools, users: &[usize], steps: &[Step], s_prev: NodeId, dropout: &mut Dropout<'_>) -> Result<NodeId> {
        let item = self.items(g, steps)?;
        let feat = self.pop_input(g, globals, steps);
        let pop = self.m.pop_proj.forward(g, &self.params, feat)?;
        let neigh = self.pool_rows(g, pools, pools.s, users, steps)?;
        let x = g.concat_cols(&[item, pop, neigh])?;
        let x = self.m.s_in.forward(g, &self.params, x)?;
        let x = self.m.s_ln.forward(g, &self.params, x)?;
        let f = self.m.s_ffn.forward(g, &self.params, x, dropout)?;
        let x = g.add(x, f)?;
        self.m.gru.forward(g, &self.params, x, s_prev)
    }

    /// `f_c` on a batch of previous-step rows; returns `(mu, sigma)`.
    fn fc(&self, g: &mut Graph, globals: &Globals<'_>, pools: &Pools, users: &[usize], prev: &[Step], s_prev: NodeId, dropout: &mut Dropout<'_>) -> Result<(NodeId, NodeId)> {
        let neigh = self.pool_rows(g, pools, pools.c, users, prev)?;
        let item = self.items(g, prev)?;
        let feat = self.pop_input(g, globals, prev);
        let y = g.input(Tensor::matrix(prev.len(), 1, prev.iter().map(|s| f64::from(s.feedback)).collect()));
        let x = g.concat_cols(&[neigh, item, feat, y, s_prev])?;
        let h = self.m.c_ffn.forward(g, &self.params, x, dropout)?;
        let h = self.m.c_ln.forward(g, &self.params, h)?;
        let mu = self.m.c_mu.forward(g, &self.params, h)?;
        let raw = self.m.c_sigma.forward(g, &self.params, h)?;
        let sp = g.softplus(raw);
        let sigma = g.add_scalar(sp, SIGMA_FLOOR);
        Ok((mu, sigma))
    }

    /// `f_y` logits `[B, 1]`; `sc = None` puts zeros in the context slot.
    fn fy(&self, g: &mut Graph, globals: &Globals<'_>, steps: &[Step], s: NodeId, sc: Option<NodeId>) -> Result<NodeId> {
        let feat = self.pop_input(g, globals, steps);
        let pop = self.m.pop_proj.forward(g, &self.params, feat)?;
        let item = self.items(g, steps)?;
        let sc = match sc {
            Some(n) => n,
            None => g.constant(steps.len(), self.config.context_dim, 0.0),
        };
        let x = g.concat_cols(&[pop, item, s, sc])?;
        let h = self.m.y_hidden.forward(g, &self.params, x)?;
        let h = g.tanh(h);
        self.m.y_out.forward(g, &self.params, h)
    }

    fn state_input(&self, g: &mut Graph, states: &[&[f64]]) -> Result<NodeId> {
        let n = self.config.state_dim;
        let mut data = Vec::with_capacity(states.len() * n);
        for s in states {
            if s.len() != n {
                return Err(Error::dim("user state", &[n], &[s.len()]));
            }
            data.extend_from_slice(s);
        }
        Ok(g.input(Tensor::matrix(states.len(), n, data)))
    }

    /// `s_t = f_s(s_{t-1}, G_t, a_t, z_t)` for one user.
    pub fn user_state_update(&self, globals: &Globals<'_>, user: usize, prev_state: &[f64], step: &Step) -> Result<Vec<f64>> {
        self.check_ids(globals, user, step)?;
        let mut g = Graph::new();
        let mut off = Dropout::eval();
        let pools = self.pools(&mut g, globals, &[(user, step.bucket)], &mut off)?;
        let s_prev = self.state_input(&mut g, &[prev_state])?;
        let s = self.fs(&mut g, globals, &pools, &[user], std::slice::from_ref(step), s_prev, &mut off)?;
        Ok(g.value(s).data().to_vec())
    }

    /// States after each step, folding from `init_state`.
    pub fn fold_states(&self, globals: &Globals<'_>, user: usize, init_state: &[f64], steps: &[Step]) -> Result<Vec<Vec<f64>>> {
        let seq = TrainSequence {
            user,
            init_state: init_state.to_vec(),
            steps: steps.to_vec(),
        };
        Ok(self.fold_many(globals, std::slice::from_ref(&seq), None)?.pop().expect("one sequence"))
    }

    /// Batched fold; `limit[i]` caps how many steps of sequence `i` are folded.
    pub fn fold_many(&self, globals: &Globals<'_>, seqs: &[TrainSequence], limit: Option<&[usize]>) -> Result<Vec<Vec<Vec<f64>>>> {
        let lens: Vec<usize> = seqs
            .iter()
            .enumerate()
            .map(|(i, s)| limit.map_or(s.steps.len(), |l| l[i].min(s.steps.len())))
            .collect();
        let mut out: Vec<Vec<Vec<f64>>> = lens.iter().map(|&l| Vec::with_capacity(l)).collect();
        let max_len = lens.iter().copied().max().unwrap_or(0);
        for seq in seqs {
            for st in &seq.steps {
                self.check_ids(globals, seq.user, st)?;
            }
        }
        for k in 0..max_len {
            let active: Vec<usize> = (0..seqs.len()).filter(|&i| lens[i] > k).collect();
            let users: Vec<usize> = active.iter().map(|&i| seqs[i].user).collect();
            let steps: Vec<Step> = active.iter().map(|&i| seqs[i].steps[k]).collect();
            let prev: Vec<&[f64]> = active
                .iter()
                .map(|&i| if k == 0 { seqs[i].init_state.as_slice() } else { out[i][k - 1].as_slice() })
                .collect();
            let mut g = Graph::new();
            let mut off = Dropout::eval();
            let pairs: Vec<(usize, usize)> = users.iter().zip(&steps).map(|(&u, s)| (u, s.bucket)).collect();
            let pools = self.pools(&mut g, globals, &pairs, &mut off)?;
            let s_prev = self.state_input(&mut g, &prev)?;
            let s = self.fs(&mut g, globals, &pools, &users, &steps, s_prev, &mut off)?;
            let v = g.value(s);
            for (r, &i) in active.iter().enumerate() {
                out[i].push(v.row(r).to_vec());
            }
        }
        Ok(out)
    }

    /// `f_c(y_{t-1}, G_{t-1}, z_{t-1}, a_{t-1}, s_{t-1})`. With `noise = None`
    /// the sample is the mean.
    pub fn context_encode(&self, globals: &Globals<'_>, user: usize, prev: &Step, prev_state: &[f64], noise: Option<&mut dyn RngCore>) -> Result<ContextPosterior> {
        self.check_ids(globals, user, prev)?;
        let mut g = Graph::new();
        let mut off = Dropout::eval();
        let pools = self.pools(&mut g, globals, &[(user, prev.bucket)], &mut off)?;
        let s_prev = self.state_input(&mut g, &[prev_state])?;
        let (mu, sigma) = self.fc(&mut g, globals, &pools, &[user], std::slice::from_ref(prev), s_prev, &mut off)?;
        let mu = g.value(mu).data().to_vec();
        let sigma = g.value(sigma).data().to_vec();
        let sample = match noise {
            Some(rng) => mu
                .iter()
                .zip(&sigma)
                .map(|(m, s)| m + rng.sample::<f64, _>(StandardNormal) * s)
                .collect(),
            None => mu.clone(),
        };
        Ok(ContextPosterior { mu, sigma, sample })
    }

    /// `P(y = 1 | z_t, a_t, s_t, s^c)`; `context = None` uses the zero vector.
    pub fn predict_feedback(&self, globals: &Globals<'_>, step: &Step, state: &[f64], context: Option<&[f64]>) -> Result<f64> {
        if step.item >= self.config.n_items {
            return Err(Error::Lookup { kind: "item", id: step.item });
        }
        let mut g = Graph::new();
        let s = self.state_input(&mut g, &[state])?;
        let sc = match context {
            Some(c) => {
                if c.len() != self.config.context_dim {
                    return Err(Error::dim("context", &[self.config.context_dim], &[c.len()]));
                }
                Some(g.input(Tensor::matrix(1, c.len(), c.to_vec())))
            }
            None => None,
        };
        let logit = self.fy(&mut g, globals, std::slice::from_ref(step), s, sc)?;
        Ok(logistic(g.value(logit).item()))
    }

    /// Monte-Carlo estimate of the interventional feedback probability of
    /// recommending `item` in `bucket`, given the previous step and the state
    /// after it. Returns the probability and `s_t`.
    #[allow(clippy::too_many_arguments)]
    pub fn debiased_feedback(
        &self,
        globals: &Globals<'_>,
        user: usize,
        prev: &Step,
        prev_state: &[f64],
        bucket: usize,
        item: usize,
        n_samples: usize,
        noise: Option<&mut dyn RngCore>,
    ) -> Result<(f64, Vec<f64>)> {
        if n_samples < 1 {
            return Err(Error::Contract("debiased_feedback needs n_samples >= 1".into()));
        }
        let cur = Step { bucket, item, feedback: 0 };
        self.check_ids(globals, user, prev)?;
        self.check_ids(globals, user, &cur)?;
        let mut g = Graph::new();
        let mut off = Dropout::eval();
        let pools = self.pools(&mut g, globals, &[(user, bucket), (user, prev.bucket)], &mut off)?;
        let s_prev = self.state_input(&mut g, &[prev_state])?;
        let s_t = self.fs(&mut g, globals, &pools, &[user], std::slice::from_ref(&cur), s_prev, &mut off)?;
        let (mu, sigma) = self.fc(&mut g, globals, &pools, &[user], std::slice::from_ref(prev), s_prev, &mut off)?;
        let nc = self.config.context_dim;
        let delta: Vec<f64> = match noise {
            Some(rng) => (0..n_samples * nc).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
            None => vec![0.0; n_samples * nc],
        };
        let rep = vec![0usize; n_samples];
        let mu_r = g.gather_rows(mu, &rep)?;
        let sigma_r = g.gather_rows(sigma, &rep)?;
        let s_r = g.gather_rows(s_t, &rep)?;
        let d = g.input(Tensor::matrix(n_samples, nc, delta));
        let ds = g.mul(d, sigma_r)?;
        let sc = g.add(mu_r, ds)?;
        let steps = vec![cur; n_samples];
        let logits = self.fy(&mut g, globals, &steps, s_r, Some(sc))?;
        let p = g.value(logits).data().iter().map(|&l| logistic(l)).sum::<f64>() / n_samples as f64;
        Ok((p, g.value(s_t).data().to_vec()))
    }

    /// Builds the negative ELBO of a batch of windows into `g`. `noise`
    /// supplies the reparameterisation draws (`None`: `delta = 0`).
    pub fn elbo_loss(
        &self,
        g: &mut Graph,
        globals: &Globals<'_>,
        windows: &[Window],
        noise: Option<&mut dyn RngCore>,
        dropout: &mut Dropout<'_>,
    ) -> Result<ElboNodes> {
        if windows.is_empty() || windows.iter().all(|w| w.steps.is_empty()) {
            return Err(Error::EmptySequence("elbo batch"));
        }
        for w in windows {
            self.check_ids(globals, w.user, &w.prev)?;
            for s in &w.steps {
                self.check_ids(globals, w.user, s)?;
            }
        }
        let b = windows.len();
        let max_len = windows.iter().map(|w| w.steps.len()).max().unwrap_or(0);
        let users: Vec<usize> = windows.iter().map(|w| w.user).collect();
        let mut pairs: Vec<(usize, usize)> = windows.iter().map(|w| (w.user, w.prev.bucket)).collect();
        for w in windows {
            pairs.extend(w.steps.iter().map(|s| (w.user, s.bucket)));
        }
        let pools = self.pools(g, globals, &pairs, dropout)?;
        let starts: Vec<&[f64]> = windows.iter().map(|w| w.start_state.as_slice()).collect();
        let mut s_prev = self.state_input(g, &starts)?;
        let mut prev: Vec<Step> = windows.iter().map(|w| w.prev).collect();
        let nc = self.config.context_dim;
        let mut noise = noise;
        let (mut mus, mut sigmas, mut cur_logits, mut prev_logits) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let (mut y_cur, mut y_prev, mut mask) = (Vec::new(), Vec::new(), Vec::new());
        for k in 0..max_len {
            // exhausted windows repeat their last step under a zero mask
            let cur: Vec<Step> = windows
                .iter()
                .map(|w| w.steps.get(k.min(w.steps.len().saturating_sub(1))).copied().unwrap_or(w.prev))
                .collect();
            let s_cur = self.fs(g, globals, &pools, &users, &cur, s_prev, dropout)?;
            let (mu, sigma) = self.fc(g, globals, &pools, &users, &prev, s_prev, dropout)?;
            let delta: Vec<f64> = match noise.as_deref_mut() {
                Some(rng) => (0..b * nc).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
                None => vec![0.0; b * nc],
            };
            let d = g.input(Tensor::matrix(b, nc, delta));
            let ds = g.mul(d, sigma)?;
            let sc = g.add(mu, ds)?;
            cur_logits.push(self.fy(g, globals, &cur, s_cur, Some(sc))?);
            prev_logits.push(self.fy(g, globals, &prev, s_prev, None)?);
            mus.push(mu);
            sigmas.push(sigma);
            for (w, (c, p)) in windows.iter().zip(cur.iter().zip(&prev)) {
                y_cur.push(f64::from(c.feedback));
                y_prev.push(f64::from(p.feedback));
                mask.push(if k < w.steps.len() { 1.0 } else { 0.0 });
            }
            s_prev = s_cur;
            prev = cur;
        }
        let positions = mask.iter().filter(|&&m| m > 0.0).count();
        let scale = 1.0 / positions as f64;
        let mask_node = g.input(Tensor::matrix(mask.len(), 1, mask));
        let mu_all = g.concat_rows(&mus)?;
        let sigma_all = g.concat_rows(&sigmas)?;
        let kl_rows = g.kl_std_normal(mu_all, sigma_all)?;
        let cur_all = g.concat_rows(&cur_logits)?;
        let nll_cur_rows = g.bce_with_logits(cur_all, &y_cur)?;
        let prev_all = g.concat_rows(&prev_logits)?;
        let nll_prev_rows = g.bce_with_logits(prev_all, &y_prev)?;
        let reduce = |g: &mut Graph, rows: NodeId| -> Result<NodeId> {
            let m = g.mul(rows, mask_node)?;
            let s = g.sum_all(m);
            Ok(g.scale(s, scale))
        };
        let kl = reduce(g, kl_rows)?;
        let nll_current = reduce(g, nll_cur_rows)?;
        let nll_previous = reduce(g, nll_prev_rows)?;
        let t = g.add(kl, nll_current)?;
        let total = g.add(t, nll_previous)?;
        Ok(ElboNodes {
            total,
            kl,
            nll_current,
            nll_previous,
            positions,
        })
    }

    /// Evaluates the negative ELBO without dropout or gradients.
    pub fn elbo_terms(&self, globals: &Globals<'_>, windows: &[Window], noise: Option<&mut dyn RngCore>) -> Result<ElboTerms> {
        let mut g = Graph::new();
        let nodes = self.elbo_loss(&mut g, globals, windows, noise, &mut Dropout::eval())?;
        Ok(ElboTerms {
            total: g.value(nodes.total).item(),
            kl: g.value(nodes.kl).item(),
            nll_current: g.value(nodes.nll_current).item(),
            nll_previous: g.value(nodes.nll_previous).item(),
        })
    }

    /// Mean held-out feedback NLL `-ln P(y_t | ...)` with `s^c = mu`.
    pub fn feedback_nll(&self, globals: &Globals<'_>, windows: &[Window]) -> Result<f64> {
        Ok(self.elbo_terms(globals, windows, None)?.nll_current)
    }
}

/// Full-sequence windows (`prev` = first step, zero start state advanced by
/// one step) for every sequence with at least two steps.
pub fn full_windows(wm: &WorldModel, globals: &Globals<'_>, seqs: &[TrainSequence]) -> Result<Vec<Window>> {
    let usable: Vec<&TrainSequence> = seqs.iter().filter(|s| s.steps.len() >= 2).collect();
    let owned: Vec<TrainSequence> = usable.iter().map(|s| (*s).clone()).collect();
    let limits = vec![1; owned.len()];
    let firsts = wm.fold_many(globals, &owned, Some(&limits))?;
    Ok(owned
        .into_iter()
        .zip(firsts)
        .map(|(s, st)| Window {
            user: s.user,
            start_state: st[0].clone(),
            prev: s.steps[0],
            steps: s.steps[1..].to_vec(),
        })
        .collect())
}

/// Logged per-user sequences with bucket indices and zero initial state.
pub fn logged_sequences(ds: &LoggedDataset, state_dim: usize) -> Vec<TrainSequence> {
    ds.user_records
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.is_empty())
        .map(|(u, recs)| TrainSequence {
            user: u,
            init_state: vec![0.0; state_dim],
            steps: recs
                .iter()
                .map(|r| Step {
                    bucket: ds.bucket_of(r.timestamp),
                    item: r.item,
                    feedback: r.feedback,
                })
                .collect(),
        })
        .collect()
}

/// A randomly initialised world model made informative enough to generate
/// learnable feedback: sharper item embeddings and output layers, a nearly
/// deterministic context posterior, and an output bias adjusted until the
/// resampled positive rate of `ds` is close to one half.
pub fn synthetic_teacher(ds: &LoggedDataset, dim: usize, seed: u64) -> Result<WorldModel> {
    let mut cfg = WorldModelConfig::new(ds.n_users, ds.n_items, dim);
    cfg.dropout = 0.0;
    let mut t = WorldModel::new(cfg, seed)?;
    let mut scale = |name: &str, f: &dyn Fn(f64) -> f64| {
        let id = t.params.id(name).expect("teacher parameter");
        for v in t.params.value_mut(id).data_mut() {
            *v = f(*v);
        }
    };
    scale("item_emb", &|v| 2.0 * v);
    scale("fy.hidden.weight", &|v| 3.0 * v);
    scale("fy.out.weight", &|v| 20.0 * v);
    // softplus(-6) keeps sigma near 2.5e-3
    scale("fc.sigma.bias", &|_| -6.0);
    let bias = t.params.id("fy.out.bias").expect("teacher parameter");
    for round in 0..4 {
        let sample = resample_feedback(&t, ds, derive_seed(seed, &[0x7e, round]))?;
        let n = sample.num_records().max(1) as f64;
        let rate = (sample.records().filter(|r| r.feedback == 1).count() as f64 / n).clamp(0.02, 0.98);
        t.params.value_mut(bias).data_mut()[0] -= (rate / (1.0 - rate)).ln();
    }
    Ok(t)
}

/// Copy of `ds` whose feedback is drawn from `teacher`: each user's items are
/// replayed in order, the first step's feedback uses a zero context and later
/// steps sample `s^c` from the posterior given the previous (resampled) step.
/// Items, timestamps, popularity and the social graph are unchanged.
pub fn resample_feedback(teacher: &WorldModel, ds: &LoggedDataset, seed: u64) -> Result<LoggedDataset> {
    let globals = Globals::of(ds);
    let mut out = ds.clone();
    for (u, recs) in out.user_records.iter_mut().enumerate() {
        let mut rng = rng_for(seed, &[u as u64]);
        let mut state = teacher.zero_state();
        let mut prev: Option<Step> = None;
        for r in recs.iter_mut() {
            let bucket = ds.bucket_of(r.timestamp);
            let p = match prev {
                None => {
                    let step = Step { bucket, item: r.item, feedback: 0 };
                    state = teacher.user_state_update(&globals, u, &state, &step)?;
                    teacher.predict_feedback(&globals, &step, &state, None)?
                }
                Some(pv) => {
                    let (p, s) = teacher.debiased_feedback(&globals, u, &pv, &state, bucket, r.item, 1, Some(&mut rng))?;
                    state = s;
                    p
                }
            };
            r.feedback = u8::from(rng.random::<f64>() < p);
            prev = Some(Step {
                bucket,
                item: r.item,
                feedback: r.feedback,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboTrainConfig {
    pub lr: f64,
    pub batch: usize,
    /// Longest window; longer sequences get a random start and a folded prefix.
    pub window: usize,
    pub clip: f64,
}

impl Default for ElboTrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch: 16,
            window: 40,
            clip: 5.0,
        }
    }
}

/// Stateful ELBO optimiser (Adam moments persist across calls).
pub struct ElboTrainer {
    pub config: ElboTrainConfig,
    adam: Adam,
}

impl ElboTrainer {
    pub fn new(config: ElboTrainConfig) -> Self {
        let adam = Adam::new(config.lr);
        Self { config, adam }
    }

    /// Samples a batch of windows from `seqs`.
    pub fn sample_windows<R: Rng + ?Sized>(&self, wm: &WorldModel, globals: &Globals<'_>, seqs: &[TrainSequence], rng: &mut R) -> Result<Vec<Window>> {
        let usable: Vec<&TrainSequence> = seqs.iter().filter(|s| s.steps.len() >= 2).collect();
        if usable.is_empty() {
            return Err(Error::EmptySequence("training sequences"));
        }
        let mut order: Vec<usize> = (0..usable.len()).collect();
        order.shuffle(rng);
        let picked: Vec<&TrainSequence> = (0..self.config.batch.max(1))
            .map(|i| usable[order[i % order.len()]])
            .collect();
        let mut starts = Vec::with_capacity(picked.len());
        for s in &picked {
            let max_start = s.steps.len().saturating_sub(self.config.window).max(1);
            starts.push(if max_start <= 1 { 1 } else { rng.random_range(1..=max_start) });
        }
        let owned: Vec<TrainSequence> = picked.iter().map(|s| (*s).clone()).collect();
        let prefix = wm.fold_many(globals, &owned, Some(&starts))?;
        Ok(owned
            .into_iter()
            .zip(prefix)
            .zip(starts)
            .map(|((s, st), j0)| {
                let end = (j0 + self.config.window).min(s.steps.len());
                Window {
                    user: s.user,
                    start_state: st[j0 - 1].clone(),
                    prev: s.steps[j0 - 1],
                    steps: s.steps[j0..end].to_vec(),
                }
            })
            .collect())
    }

    /// One optimiser step on a batch; returns the pre-step loss.
    pub fn step<R: Rng>(&mut self, wm: &mut WorldModel, globals: &Globals<'_>, windows: &[Window], rng: &mut R) -> Result<f64> {
        let mut noise = rng_for(rng.next_u64(), &[1]);
        let mut drop_rng = rng_for(rng.next_u64(), &[2]);
        let mut g = Graph::new();
        let mut dropout = Dropout::train(wm.config.dropout, &mut drop_rng);
        let nodes = wm.elbo_loss(&mut g, globals, windows, Some(&mut noise), &mut dropout)?;
        let loss = g.value(nodes.total).item();
        if !loss.is_finite() {
            return Err(Error::Diverged {
                phase: "elbo".into(),
                step: self.adam.steps() as usize,
                loss,
            });
        }
        wm.params.zero_grad();
        g.backward(nodes.total, &mut wm.params)?;
        if self.config.clip > 0.0 {
            wm.params.clip_grad_norm(self.config.clip);
        }
        self.adam.step(&mut wm.params);
        Ok(loss)
    }

    /// `steps` optimiser steps over batches drawn from fixed windows.
    pub fn train_windows<R: Rng>(&mut self, wm: &mut WorldModel, globals: &Globals<'_>, windows: &[Window], steps: usize, rng: &mut R) -> Result<Vec<f64>> {
        let usable: Vec<&Window> = windows.iter().filter(|w| !w.steps.is_empty()).collect();
        if usable.is_empty() {
            return Err(Error::EmptySequence("finetune windows"));
        }
        let mut curve = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch: Vec<Window> = (0..self.config.batch.max(1))
                .map(|_| usable[rng.random_range(0..usable.len())].clone())
                .collect();
            curve.push(self.step(wm, globals, &batch, rng)?);
        }
        Ok(curve)
    }

    /// `steps` optimiser steps over random windows; returns the loss curve.
    pub fn train<R: Rng>(&mut self, wm: &mut WorldModel, globals: &Globals<'_>, seqs: &[TrainSequence], steps: usize, rng: &mut R) -> Result<Vec<f64>> {
        let mut curve = Vec::with_capacity(steps);
        for _ in 0..steps {
            let windows = self.sample_windows(wm, globals, seqs, rng)?;
            curve.push(self.step(wm, globals, &windows, rng)?);
        }
        Ok(curve)
    }
}
