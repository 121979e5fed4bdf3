//! Contrastive Q-network: positive and negative sub-sequences run through one
//! shared GRU, `o = o+ - o-`, and `Q(o, a) = exp(a . o)`.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{logistic, Graph, NodeId, EXP_CLAMP};
use crate::error::{Error, Result};
use crate::layers::{uniform_init, GruCell};
use crate::optim::Adam;
use crate::params::{ParamId, ParamStore};
use crate::rng::{hash_u64, rng_for};
use crate::tensor::Tensor;

pub const DEFAULT_MEMORY_SIZE: usize = 20;

/// Interaction history entry `(item, feedback)`.
pub type HistoryEntry = (usize, u8);

/// Positive and negative slot sequences; `None` is the empty item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSequence {
    pub positive: Vec<Option<usize>>,
    pub negative: Vec<Option<usize>>,
}

/// Keeps the last `memory_size` entries; feedback 1 fills the positive slot,
/// feedback 0 the negative slot, and the other slot stays empty.
pub fn split_sequence(history: &[HistoryEntry], memory_size: usize) -> SplitSequence {
    let tail = &history[history.len().saturating_sub(memory_size)..];
    let positive = tail.iter().map(|&(a, y)| (y == 1).then_some(a)).collect();
    let negative = tail.iter().map(|&(a, y)| (y != 1).then_some(a)).collect();
    SplitSequence { positive, negative }
}

/// Naive-negative split: every empty negative slot is filled with an item the
/// user never interacted with, chosen by hashing `(salt, position, item)`.
pub fn split_sequence_naive(history: &[HistoryEntry], memory_size: usize, n_items: usize, known: &[bool], salt: u64) -> SplitSequence {
    let mut split = split_sequence(history, memory_size);
    let unknown: Vec<usize> = (0..n_items).filter(|&i| !known.get(i).copied().unwrap_or(false)).collect();
    if unknown.is_empty() {
        return split;
    }
    let offset = history.len().saturating_sub(memory_size);
    for (k, slot) in split.negative.iter_mut().enumerate() {
        if slot.is_none() {
            let anchor = split.positive[k].unwrap_or(0) as u64;
            let h = hash_u64(&[salt, (offset + k) as u64, anchor]);
            *slot = Some(unknown[(h % unknown.len() as u64) as usize]);
        }
    }
    split
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderKind {
    /// Shared GRU over the positive and negative sequences.
    Contrastive,
    /// Contrastive encoder whose empty negative slots hold unknown items.
    NaiveNegative,
    /// One GRU over the full history with a feedback embedding added.
    FullSequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub n_items: usize,
    pub dim: usize,
    pub memory_size: usize,
    pub encoder: EncoderKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyState {
    pub o_plus: Vec<f64>,
    pub o_minus: Vec<f64>,
    pub o: Vec<f64>,
}

/// An observation the encoder can consume.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub history: Vec<HistoryEntry>,
    /// Salt for naive-negative filling (the user id).
    pub salt: u64,
}

impl Observation {
    pub fn new(history: Vec<HistoryEntry>, salt: u64) -> Self {
        Self { history, salt }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action: usize,
    /// TD reward in `[0, 1]`.
    pub reward: f64,
    /// Sampled binary feedback that extended the history.
    pub feedback: u8,
    pub next_obs: Observation,
    pub done: bool,
}

#[derive(Serialize, Deserialize)]
struct PolicyMeta {
    config: PolicyConfig,
    known: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct QNetwork {
    pub config: PolicyConfig,
    pub params: ParamStore,
    item_emb: ParamId,
    null_emb: ParamId,
    feedback_emb: ParamId,
    gru: GruCell,
    /// Per-user known-item masks for the naive-negative encoder.
    known: Vec<Vec<bool>>,
}

impl QNetwork {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        if config.n_items == 0 || config.dim == 0 || config.memory_size == 0 {
            return Err(Error::Config(format!("invalid policy sizes {config:?}")));
        }
        let mut rng = rng_for(seed, &[0x9e7]);
        let mut params = ParamStore::new();
        let d = config.dim;
        let item_emb = params.add("q.item_emb", uniform_init(&mut rng, config.n_items, d, d))?;
        let null_emb = params.add("q.null_emb", uniform_init(&mut rng, 1, d, d))?;
        let feedback_emb = params.add("q.feedback_emb", uniform_init(&mut rng, 2, d, d))?;
        let gru = GruCell::new(&mut params, "q.gru", d, d, &mut rng)?;
        Ok(Self {
            config,
            params,
            item_emb,
            null_emb,
            feedback_emb,
            gru,
            known: Vec::new(),
        })
    }

    /// Items each user is known to have interacted with; used by the
    /// naive-negative encoder to pick unknown items.
    pub fn set_known_items(&mut self, known: Vec<Vec<bool>>) {
        self.known = known;
    }

    /// Writes `path` (parameters) and `path` with a `.json` extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.params.save(path)?;
        let known: Vec<Vec<usize>> = self
            .known
            .iter()
            .map(|k| k.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect())
            .collect();
        let meta = PolicyMeta {
            config: self.config.clone(),
            known,
        };
        std::fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let meta: PolicyMeta = serde_json::from_slice(&std::fs::read(path.with_extension("json"))?)?;
        let mut net = Self::new(meta.config, 0)?;
        net.params.load_values_from(path)?;
        let n = net.config.n_items;
        net.known = meta
            .known
            .iter()
            .map(|items| {
                let mut k = vec![false; n];
                for &i in items {
                    if i < n {
                        k[i] = true;
                    }
                }
                k
            })
            .collect();
        Ok(net)
    }

    pub fn item_embedding(&self) -> ParamId {
        self.item_emb
    }

    fn split(&self, obs: &Observation) -> SplitSequence {
        match self.config.encoder {
            EncoderKind::NaiveNegative => {
                let known = self.known.get(obs.salt as usize).map(Vec::as_slice).unwrap_or(&[]);
                split_sequence_naive(&obs.history, self.config.memory_size, self.config.n_items, known, obs.salt)
            }
            _ => split_sequence(&obs.history, self.config.memory_size),
        }
    }

    fn check_items(&self, obs: &Observation) -> Result<()> {
        match obs.history.iter().find(|(a, _)| *a >= self.config.n_items) {
            Some(&(a, _)) => Err(Error::Lookup { kind: "item", id: a }),
            None => Ok(()),
        }
    }

    /// Runs the GRU over left-padded slot sequences; rows stay exactly zero
    /// until their first real slot.
    fn run_gru(&self, g: &mut Graph, store: &ParamStore, seqs: &[Vec<Option<usize>>], extra: Option<&[Vec<u8>]>) -> Result<NodeId> {
        let d = self.config.dim;
        let rows = seqs.len();
        let max_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut h = g.constant(rows, d, 0.0);
        if max_len == 0 {
            return Ok(h);
        }
        let items = g.param(store, self.item_emb);
        let null = g.param(store, self.null_emb);
        let table = g.concat_rows(&[items, null])?;
        let null_row = self.config.n_items;
        let fb_table = extra.map(|_| g.param(store, self.feedback_emb));
        for k in 0..max_len {
            let mut idx = Vec::with_capacity(rows);
            let mut mask = Vec::with_capacity(rows);
            let mut fb = Vec::with_capacity(rows);
            for (r, s) in seqs.iter().enumerate() {
                let pad = max_len - s.len();
                if k < pad {
                    idx.push(null_row);
                    mask.push(0.0);
                    fb.push(0);
                } else {
                    idx.push(s[k - pad].unwrap_or(null_row));
                    mask.push(1.0);
                    fb.push(extra.map_or(0, |e| e[r][k - pad] as usize));
                }
            }
            let mut x = g.gather_rows(table, &idx)?;
            if let Some(t) = fb_table {
                let f = g.gather_rows(t, &fb)?;
                x = g.add(x, f)?;
            }
            let h_new = self.gru.forward(g, store, x, h)?;
            if mask.iter().all(|&m| m == 1.0) {
                h = h_new;
            } else {
                let keep: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
                let m = g.input(Tensor::matrix(rows, 1, mask));
                let km = g.input(Tensor::matrix(rows, 1, keep));
                let a = g.mul(h_new, m)?;
                let b = g.mul(h, km)?;
                h = g.add(a, b)?;
            }
        }
        Ok(h)
    }

    /// Policy states `o` for a batch, `[B, dim]`; also returns `(o+, o-)` for
    /// contrastive encoders.
    pub fn encode_batch(&self, g: &mut Graph, store: &ParamStore, obs: &[Observation]) -> Result<(NodeId, Option<(NodeId, NodeId)>)> {
        for o in obs {
            self.check_items(o)?;
        }
        match self.config.encoder {
            EncoderKind::Contrastive | EncoderKind::NaiveNegative => {
                let splits: Vec<SplitSequence> = obs.iter().map(|o| self.split(o)).collect();
                let mut seqs: Vec<Vec<Option<usize>>> = splits.iter().map(|s| s.positive.clone()).collect();
                seqs.extend(splits.iter().map(|s| s.negative.clone()));
                let h = self.run_gru(g, store, &seqs, None)?;
                let b = obs.len();
                let plus = g.slice_rows(h, 0, b)?;
                let minus = g.slice_rows(h, b, b)?;
                let o = g.sub(plus, minus)?;
                Ok((o, Some((plus, minus))))
            }
            EncoderKind::FullSequence => {
                let tails: Vec<&[HistoryEntry]> = obs
                    .iter()
                    .map(|o| &o.history[o.history.len().saturating_sub(self.config.memory_size)..])
                    .collect();
                let seqs: Vec<Vec<Option<usize>>> = tails.iter().map(|t| t.iter().map(|&(a, _)| Some(a)).collect()).collect();
                let fbs: Vec<Vec<u8>> = tails.iter().map(|t| t.iter().map(|&(_, y)| y).collect()).collect();
                let h = self.run_gru(g, store, &seqs, Some(&fbs))?;
                Ok((h, None))
            }
        }
    }

    pub fn encode_state(&self, obs: &Observation) -> Result<PolicyState> {
        let mut g = Graph::new();
        let (o, parts) = self.encode_batch(&mut g, &self.params, std::slice::from_ref(obs))?;
        let o = g.value(o).data().to_vec();
        let (o_plus, o_minus) = match parts {
            Some((p, m)) => (g.value(p).data().to_vec(), g.value(m).data().to_vec()),
            None => (o.clone(), vec![0.0; o.len()]),
        };
        Ok(PolicyState { o_plus, o_minus, o })
    }

    /// `a . o` for every item, per observation, using `store`'s values.
    pub fn scores_with(&self, store: &ParamStore, obs: &[Observation]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let (o, _) = self.encode_batch(&mut g, store, obs)?;
        let e = store.value(self.item_emb);
        let ov = g.value(o);
        let d = self.config.dim;
        Ok((0..obs.len())
            .map(|r| {
                let orow = ov.row(r);
                (0..self.config.n_items)
                    .map(|i| e.data()[i * d..(i + 1) * d].iter().zip(orow).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect())
    }

    pub fn scores(&self, obs: &Observation) -> Result<Vec<f64>> {
        Ok(self.scores_with(&self.params, std::slice::from_ref(obs))?.pop().expect("one row"))
    }

    /// `Q(o, a) = exp(a . o)` for every item.
    pub fn q_values(&self, obs: &Observation) -> Result<Vec<f64>> {
        Ok(self.scores(obs)?.into_iter().map(|s| q_from_score(s).0).collect())
    }

    /// Negative ELBO-free TD loss (`mean (r - Q(o, a))^2`) as a graph node.
    pub fn td_loss(&self, g: &mut Graph, batch: &[Transition], targets: &[f64]) -> Result<NodeId> {
        if batch.is_empty() {
            return Err(Error::EmptySequence("td batch"));
        }
        if targets.len() != batch.len() {
            return Err(Error::dim("td targets", &[batch.len()], &[targets.len()]));
        }
        let obs: Vec<Observation> = batch.iter().map(|t| t.obs.clone()).collect();
        let (o, _) = self.encode_batch(g, &self.params, &obs)?;
        let table = g.param(&self.params, self.item_emb);
        let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
        if let Some(&a) = actions.iter().find(|&&a| a >= self.config.n_items) {
            return Err(Error::Lookup { kind: "item", id: a });
        }
        let a = g.gather_rows(table, &actions)?;
        let ao = g.mul(a, o)?;
        let logit = g.sum_cols(ao);
        let q = g.exp_clamped(logit);
        let r = g.input(Tensor::matrix(batch.len(), 1, targets.to_vec()));
        let diff = g.sub(r, q)?;
        let sq = g.square(diff);
        Ok(g.mean_all(sq))
    }

    /// `r_t = y_t + gamma max_a Q_target(o_{t+1}, a)` (`done`: `r_t = y_t`).
    /// With `double`, the argmax comes from the online parameters.
    pub fn td_targets(&self, target: &ParamStore, batch: &[Transition], gamma: f64, double: bool) -> Result<Vec<f64>> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma {gamma} outside [0, 1)")));
        }
        let next: Vec<Observation> = batch.iter().map(|t| t.next_obs.clone()).collect();
        let target_scores = self.scores_with(target, &next)?;
        let online_scores = if double { Some(self.scores_with(&self.params, &next)?) } else { None };
        Ok(batch
            .iter()
            .enumerate()
            .map(|(r, t)| {
                if t.done {
                    return t.reward;
                }
                let ts = &target_scores[r];
                let best = match &online_scores {
                    Some(os) => ts[argmax_lowest(&os[r])],
                    None => ts[argmax_lowest(ts)],
                };
                t.reward + gamma * q_from_score(best).0
            })
            .collect())
    }
}

/// `exp(min(s, 700))` and whether the clamp was hit.
pub fn q_from_score(score: f64) -> (f64, bool) {
    if score > EXP_CLAMP {
        (EXP_CLAMP.exp(), true)
    } else {
        (score.exp(), false)
    }
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Epsilon-greedy choice among `candidates` using per-item `scores`.
pub fn select_action<R: Rng + ?Sized>(scores: &[f64], candidates: &[usize], epsilon: f64, rng: &mut R) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Contract("select_action needs candidates".into()));
    }
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(candidates[rng.random_range(0..candidates.len())]);
    }
    let mut best = candidates[0];
    for &c in &candidates[1..] {
        let (s, b) = (scores[c], scores[best]);
        if s > b || (s == b && c < best) {
            best = c;
        }
    }
    Ok(best)
}

/// `(-ln sigmoid(a.o+ - a.o-), -ln(e^{a.o+} / (e^{a.o+} + e^{a.o-})))`.
pub fn contrastive_identity_check(a: &[f64], o_plus: &[f64], o_minus: &[f64]) -> (f64, f64) {
    let dot = |x: &[f64]| a.iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
    let (sp, sm) = (dot(o_plus), dot(o_minus));
    let lhs = -logistic(sp - sm).ln();
    let m = sp.max(sm);
    let rhs = -((sp - m) - ((sp - m).exp() + (sm - m).exp()).ln());
    (lhs, rhs)
}

/// Linear epsilon decay from `start` to `end` over the first `frac` of episodes.
pub fn epsilon_schedule(start: f64, end: f64, frac: f64, episode: usize, total: usize) -> f64 {
    let horizon = (frac * total as f64).max(1.0);
    let t = episode as f64 / horizon;
    if t >= 1.0 {
        end
    } else {
        start + (end - start) * t
    }
}

/// Fixed-capacity ring buffer of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
    pushed: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::new(),
            next: 0,
            pushed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total_pushed(&self) -> u64 {
        self.pushed
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        self.pushed += 1;
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sample without replacement of `min(n, len)` transitions.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Transition> {
        let n = n.min(self.items.len());
        sample(rng, self.items.len(), n).into_iter().map(|i| self.items[i].clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DqnConfig {
    pub lr: f64,
    pub batch: usize,
    pub gamma: f64,
    pub target_update: usize,
    pub update_size: usize,
    pub double: bool,
    pub clip: f64,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch: 1024,
            gamma: 0.95,
            target_update: 1000,
            update_size: 10_000,
            double: false,
            clip: 10.0,
        }
    }
}

/// Online network, target copy and optimiser state.
pub struct DqnLearner {
    pub net: QNetwork,
    pub target: ParamStore,
    pub config: DqnConfig,
    adam: Adam,
    steps: usize,
    syncs: Vec<usize>,
}

impl DqnLearner {
    pub fn new(net: QNetwork, config: DqnConfig) -> Self {
        let target = net.params.clone();
        let adam = Adam::new(config.lr);
        Self {
            net,
            target,
            config,
            adam,
            steps: 0,
            syncs: Vec::new(),
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Optimiser steps after which the target network was synced.
    pub fn sync_steps(&self) -> &[usize] {
        &self.syncs
    }

    pub fn sync_target(&mut self) -> Result<()> {
        self.target.copy_values_from(&self.net.params)
    }

    /// One TD step on `batch`; returns the pre-step loss.
    pub fn step_on(&mut self, batch: &[Transition]) -> Result<f64> {
        let targets = self.net.td_targets(&self.target, batch, self.config.gamma, self.config.double)?;
        let mut g = Graph::new();
        let loss = self.net.td_loss(&mut g, batch, &targets)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                phase: "td".into(),
                step: self.steps,
                loss: value,
            });
        }
        self.net.params.zero_grad();
        g.backward(loss, &mut self.net.params)?;
        if self.config.clip > 0.0 {
            self.net.params.clip_grad_norm(self.config.clip);
        }
        self.adam.step(&mut self.net.params);
        self.steps += 1;
        if self.config.target_update > 0 && self.steps % self.config.target_update == 0 {
            self.sync_target()?;
            self.syncs.push(self.steps);
        }
        Ok(value)
    }

    /// Up to `k` TD steps. Does nothing while the buffer holds fewer than
    /// `update_size` transitions.
    pub fn train<R: Rng + ?Sized>(&mut self, buffer: &ReplayBuffer, k: usize, rng: &mut R) -> Result<Vec<f64>> {
        if buffer.len() < self.config.update_size.max(1) {
            log::info!(
                "replay buffer holds {} < update size {}; skipping policy update",
                buffer.len(),
                self.config.update_size
            );
            return Ok(Vec::new());
        }
        let mut curve = Vec::with_capacity(k);
        for _ in 0..k {
            let batch = buffer.sample(self.config.batch, rng);
            curve.push(self.step_on(&batch)?);
        }
        Ok(curve)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(encoder: EncoderKind, dim: usize, n_items: usize) -> QNetwork {
        QNetwork::new(
            PolicyConfig {
                n_items,
                dim,
                memory_size: 20,
                encoder,
            },
            4,
        )
        .unwrap()
    }

    #[test]
    fn split_examples() {
        let s = split_sequence(&[(1, 1), (2, 0), (3, 1)], 20);
        assert_eq!(s.positive, vec![Some(1), None, Some(3)]);
        assert_eq!(s.negative, vec![None, Some(2), None]);
        assert_eq!(split_sequence(&[], 20), SplitSequence { positive: vec![], negative: vec![] });
        let long: Vec<HistoryEntry> = (0..25).map(|i| (i, (i % 2) as u8)).collect();
        let s = split_sequence(&long, 20);
        assert_eq!(s.positive.len(), 20);
        assert_eq!(s.positive[0], Some(5));
    }

    #[test]
    fn empty_history_gives_zero_state_and_lowest_id() {
        let q = net(EncoderKind::Contrastive, 4, 6);
        let st = q.encode_state(&Observation::new(vec![], 0)).unwrap();
        assert!(st.o.iter().all(|&v| v == 0.0));
        let scores = q.scores(&Observation::new(vec![], 0)).unwrap();
        let mut rng = rng_for(0, &[]);
        assert_eq!(select_action(&scores, &[3, 1, 4, 2], 0.0, &mut rng).unwrap(), 1);
        assert!(q.q_values(&Observation::new(vec![], 0)).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn swapping_feedback_negates_state() {
        let q = net(EncoderKind::Contrastive, 5, 8);
        let a = q.encode_state(&Observation::new(vec![(1, 1), (2, 0), (7, 1)], 0)).unwrap();
        let b = q.encode_state(&Observation::new(vec![(1, 0), (2, 1), (7, 0)], 0)).unwrap();
        for (x, y) in a.o.iter().zip(&b.o) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn one_item_matches_hand_gru() {
        let q = net(EncoderKind::Contrastive, 3, 4);
        let st = q.encode_state(&Observation::new(vec![(2, 1)], 0)).unwrap();
        let e = q.params.value(q.item_emb).row(2).to_vec();
        let null = q.params.value(q.null_emb).data().to_vec();
        let zero = Tensor::vector(vec![0.0; 3]);
        let hp = q.gru.step(&q.params, &Tensor::vector(e), &zero).unwrap();
        let hm = q.gru.step(&q.params, &Tensor::vector(null), &zero).unwrap();
        for i in 0..3 {
            assert!((st.o[i] - (hp.data()[i] - hm.data()[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn batching_and_padding_are_exact() {
        let q = net(EncoderKind::Contrastive, 4, 10);
        let a = Observation::new(vec![(3, 1)], 0);
        let b = Observation::new(vec![(1, 0), (4, 1), (9, 0), (2, 1)], 0);
        let single = q.scores(&a).unwrap();
        let both = q.scores_with(&q.params, &[a, b]).unwrap();
        assert_eq!(single, both[0]);
    }

    #[test]
    fn q_value_examples() {
        assert_eq!(q_from_score(0.0), (1.0, false));
        assert!((q_from_score(2f64.ln()).0 - 2.0).abs() < 1e-15);
        assert!(q_from_score(800.0).1);
    }

    #[test]
    fn identity_examples() {
        let (l, r) = contrastive_identity_check(&[1.0], &[0.3], &[0.3]);
        assert!((l - 2f64.ln()).abs() < 1e-15 && (r - 2f64.ln()).abs() < 1e-15);
        let (l, r) = contrastive_identity_check(&[1.0], &[3f64.ln()], &[0.0]);
        assert!((l + 0.75f64.ln()).abs() < 1e-15 && (r + 0.75f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn done_transition_with_matching_q_has_zero_loss() {
        let q = net(EncoderKind::Contrastive, 3, 4);
        let t = Transition {
            obs: Observation::new(vec![], 0),
            action: 1,
            reward: 1.0,
            feedback: 1,
            next_obs: Observation::new(vec![(1, 1)], 0),
            done: true,
        };
        let targets = q.td_targets(&q.params, std::slice::from_ref(&t), 0.9, false).unwrap();
        assert_eq!(targets, vec![1.0]);
        let mut g = Graph::new();
        let l = q.td_loss(&mut g, &[t], &targets).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn replay_ring_overwrites_oldest() {
        let mut buf = ReplayBuffer::new(3);
        for i in 0..5 {
            buf.push(Transition {
                obs: Observation::new(vec![], 0),
                action: i,
                reward: 0.0,
                feedback: 0,
                next_obs: Observation::new(vec![], 0),
                done: true,
            });
        }
        let mut actions: Vec<usize> = buf.iter().map(|t| t.action).collect();
        actions.sort();
        assert_eq!(actions, vec![2, 3, 4]);
        let mut rng = rng_for(1, &[]);
        let s = buf.sample(3, &mut rng);
        let mut got: Vec<usize> = s.iter().map(|t| t.action).collect();
        got.sort();
        assert_eq!(got, vec![2, 3, 4]);
    }

    #[test]
    fn naive_split_fills_with_unknown_items() {
        let known = vec![true, true, false, false, false];
        let s = split_sequence_naive(&[(0, 1), (1, 0)], 20, 5, &known, 7);
        assert_eq!(s.negative[1], Some(1));
        let filled = s.negative[0].unwrap();
        assert!(filled >= 2);
    }

    #[test]
    fn epsilon_decays_linearly() {
        assert_eq!(epsilon_schedule(0.3, 0.05, 0.8, 0, 100), 0.3);
        assert!((epsilon_schedule(0.3, 0.05, 0.8, 40, 100) - 0.175).abs() < 1e-12);
        assert_eq!(epsilon_schedule(0.3, 0.05, 0.8, 90, 100), 0.05);
    }

    #[test]
    fn full_sequence_encoder_runs() {
        let q = net(EncoderKind::FullSequence, 4, 6);
        let st = q.encode_state(&Observation::new(vec![(1, 1), (2, 0)], 0)).unwrap();
        assert_eq!(st.o.len(), 4);
        assert!(st.o.iter().any(|&v| v != 0.0));
    }
}
