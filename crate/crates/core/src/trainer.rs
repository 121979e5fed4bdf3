//! Pretrain the world model, then loop {collect simulated episodes, train the
//! Q-network, finetune the world model} until the episode budget or
//! convergence.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LoggedDataset;
use crate::error::{Error, Result};
use crate::policy::{
    epsilon_schedule, select_action, DqnConfig, DqnLearner, EncoderKind, HistoryEntry, Observation, PolicyConfig, QNetwork,
    ReplayBuffer, Transition,
};
use crate::rng::{derive_seed, rng_for};
use crate::world_model::{logged_sequences, ElboTrainConfig, ElboTrainer, Globals, Step, Window, WorldModel, WorldModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "dmir")]
    Dmir,
    #[serde(rename = "dmir-d")]
    DmirD,
    #[serde(rename = "dqn-naive-neg")]
    DqnNaiveNeg,
    #[serde(rename = "dqn+wm")]
    DqnWm,
    #[serde(rename = "random")]
    Random,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Dmir, Variant::DmirD, Variant::DqnNaiveNeg, Variant::DqnWm, Variant::Random];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dmir => "dmir",
            Variant::DmirD => "dmir-d",
            Variant::DqnNaiveNeg => "dqn-naive-neg",
            Variant::DqnWm => "dqn+wm",
            Variant::Random => "random",
        }
    }

    pub fn encoder(self) -> EncoderKind {
        match self {
            Variant::DqnNaiveNeg => EncoderKind::NaiveNegative,
            Variant::DqnWm => EncoderKind::FullSequence,
            _ => EncoderKind::Contrastive,
        }
    }

    pub fn uses_world_model(self) -> bool {
        matches!(self, Variant::Dmir | Variant::DqnNaiveNeg | Variant::DqnWm)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected dmir, dmir-d, dqn-naive-neg, dqn+wm or random)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lr: f64,
    pub batch: usize,
    pub buffer: usize,
    pub update_size: usize,
    pub gamma: f64,
    pub target_update: usize,
    pub droprate: f64,
    pub dim: usize,
    pub memory_size: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the episode budget over which epsilon decays.
    pub epsilon_decay: f64,
    /// World-model steps before the loop.
    pub k_c: usize,
    /// World-model steps per finetune phase; `None` reuses `k_c`.
    pub k_c_finetune: Option<usize>,
    pub k_q: usize,
    pub wm_lr: f64,
    pub wm_batch: usize,
    pub wm_window: usize,
    /// Outer loops; each collects one episode per user.
    pub episodes: usize,
    pub horizon: usize,
    pub double: bool,
    /// Train on sampled binary feedback instead of the dense probability.
    pub binary_reward: bool,
    pub reward_samples: usize,
    pub convergence_tol: f64,
    pub convergence_loops: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Dmir,
            lr: 0.001,
            batch: 1024,
            buffer: 50_000,
            update_size: 10_000,
            gamma: 0.95,
            target_update: 1000,
            droprate: 0.3,
            dim: 64,
            memory_size: 20,
            epsilon_start: 0.3,
            epsilon_end: 0.05,
            epsilon_decay: 0.8,
            k_c: 2000,
            k_c_finetune: None,
            k_q: 1000,
            wm_lr: 0.001,
            wm_batch: 16,
            wm_window: 40,
            episodes: 50,
            horizon: 32,
            double: false,
            binary_reward: false,
            reward_samples: crate::world_model::DEFAULT_REWARD_SAMPLES,
            convergence_tol: 0.01,
            convergence_loops: 3,
            grad_clip: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Laptop-scale settings for the bundled dataset.
    pub fn desk() -> Self {
        Self {
            dim: 16,
            horizon: 32,
            batch: 128,
            update_size: 1000,
            target_update: 100,
            lr: 0.003,
            k_c: 600,
            k_c_finetune: Some(20),
            k_q: 100,
            wm_lr: 0.003,
            episodes: 12,
            gamma: 0.5,
            double: true,
            ..Self::default()
        }
    }

    pub fn finetune_steps(&self) -> usize {
        self.k_c_finetune.unwrap_or(self.k_c)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch", self.batch),
            ("buffer", self.buffer),
            ("update_size", self.update_size),
            ("target_update", self.target_update),
            ("dim", self.dim),
            ("memory_size", self.memory_size),
            ("wm_batch", self.wm_batch),
            ("wm_window", self.wm_window),
            ("reward_samples", self.reward_samples),
            ("convergence_loops", self.convergence_loops),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if !(self.lr > 0.0 && self.wm_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.droprate) {
            return Err(Error::Config(format!("droprate {} outside [0, 1)", self.droprate)));
        }
        for (name, e) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::Config(format!("{name} {e} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn dqn(&self) -> DqnConfig {
        DqnConfig {
            lr: self.lr,
            batch: self.batch,
            gamma: self.gamma,
            target_update: self.target_update,
            update_size: self.update_size,
            double: self.double,
            clip: self.grad_clip,
        }
    }

    fn elbo(&self) -> ElboTrainConfig {
        ElboTrainConfig {
            lr: self.wm_lr,
            batch: self.wm_batch,
            window: self.wm_window,
            ..ElboTrainConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Collect,
    Policy,
    Finetune,
    Offline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseEntry {
    pub phase: Phase,
    pub outer_loop: Option<usize>,
    pub steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub pretrain: Vec<f64>,
    pub policy: Vec<f64>,
    pub finetune: Vec<f64>,
    /// Mean simulated episode reward per outer loop.
    pub episode_reward: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub seed: u64,
    pub checkpoints: BTreeMap<String, PathBuf>,
    pub curves: Curves,
    pub phases: Vec<PhaseEntry>,
    pub converged_at: Option<usize>,
    pub wall_clock_secs: f64,
    pub error: Option<String>,
}

impl RunManifest {
    fn new(config: &TrainConfig) -> Self {
        Self {
            config: config.clone(),
            seed: config.seed,
            checkpoints: BTreeMap::new(),
            curves: Curves::default(),
            phases: Vec::new(),
            converged_at: None,
            wall_clock_secs: 0.0,
            error: None,
        }
    }

    fn log(&mut self, phase: Phase, outer_loop: Option<usize>, steps: usize) {
        log::info!("phase {phase:?} loop {outer_loop:?} steps {steps}");
        self.phases.push(PhaseEntry { phase, outer_loop, steps });
    }

    /// Equality ignoring wall-clock time.
    pub fn same_run(&self, other: &RunManifest) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.wall_clock_secs = 0.0;
        b.wall_clock_secs = 0.0;
        a == b
    }

    /// Writes `manifest.json` and `curves.csv` (`phase,index,value`).
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)?)?;
        let mut w = csv::Writer::from_path(dir.join("curves.csv"))?;
        w.write_record(["phase", "index", "value"])?;
        let c = &self.curves;
        for (name, values) in [
            ("pretrain", &c.pretrain),
            ("policy", &c.policy),
            ("finetune", &c.finetune),
            ("episode_reward", &c.episode_reward),
        ] {
            for (i, v) in values.iter().enumerate() {
                w.write_record([name.to_string(), i.to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(dir.as_ref().join("manifest.json"))?)?)
    }
}

fn world_model_config(ds: &LoggedDataset, cfg: &TrainConfig) -> WorldModelConfig {
    let mut c = WorldModelConfig::new(ds.n_users, ds.n_items, cfg.dim);
    c.dropout = cfg.droprate;
    c
}

/// Fresh world model trained for `k_c` ELBO steps on the logged sequences.
pub fn pretrain_world_model(ds: &LoggedDataset, cfg: &TrainConfig) -> Result<(WorldModel, Vec<f64>)> {
    if ds.num_records() == 0 {
        return Err(Error::EmptySequence("dataset"));
    }
    let mut wm = WorldModel::new(world_model_config(ds, cfg), derive_seed(cfg.seed, &[0x3d]))?;
    let globals = Globals::of(ds);
    let seqs = logged_sequences(ds, wm.state_dim());
    let mut trainer = ElboTrainer::new(cfg.elbo());
    let mut rng = rng_for(cfg.seed, &[0x3e]);
    let curve = trainer.train(&mut wm, &globals, &seqs, cfg.k_c, &mut rng)?;
    Ok((wm, curve))
}

/// Where a simulated episode begins: the user's logged history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeStart {
    pub user: usize,
    pub history: Vec<HistoryEntry>,
    pub prev: Step,
    pub state: Vec<f64>,
}

/// Logged history per user (tail of `memory_size` entries) and the world-model
/// state after folding it. Users without records are skipped.
pub fn episode_starts(wm: &WorldModel, ds: &LoggedDataset, memory_size: usize) -> Result<Vec<EpisodeStart>> {
    let globals = Globals::of(ds);
    let seqs = logged_sequences(ds, wm.state_dim());
    let states = wm.fold_many(&globals, &seqs, None)?;
    Ok(seqs
        .iter()
        .zip(states)
        .map(|(s, st)| EpisodeStart {
            user: s.user,
            history: logged_history(ds, s.user, memory_size),
            prev: *s.steps.last().expect("non-empty sequence"),
            state: st.last().expect("non-empty sequence").clone(),
        })
        .collect())
}

/// Like [`episode_starts`] but cut at a uniformly drawn prefix of each
/// user's log, so simulated episodes also begin from earlier histories.
pub fn sampled_episode_starts(wm: &WorldModel, ds: &LoggedDataset, memory_size: usize, seed: u64) -> Result<Vec<EpisodeStart>> {
    let globals = Globals::of(ds);
    let seqs = logged_sequences(ds, wm.state_dim());
    let cuts: Vec<usize> = seqs
        .iter()
        .map(|s| rng_for(seed, &[s.user as u64]).random_range(1..=s.steps.len()))
        .collect();
    let states = wm.fold_many(&globals, &seqs, Some(&cuts))?;
    Ok(seqs
        .iter()
        .zip(states)
        .zip(&cuts)
        .map(|((s, st), &cut)| {
            let recs = &ds.user_records[s.user][..cut];
            EpisodeStart {
                user: s.user,
                history: recs[cut.saturating_sub(memory_size)..].iter().map(|r| (r.item, r.feedback)).collect(),
                prev: s.steps[cut - 1],
                state: st[cut - 1].clone(),
            }
        })
        .collect())
}

pub fn logged_history(ds: &LoggedDataset, user: usize, memory_size: usize) -> Vec<HistoryEntry> {
    let recs = &ds.user_records[user];
    recs[recs.len().saturating_sub(memory_size)..].iter().map(|r| (r.item, r.feedback)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollectOptions {
    pub bucket: usize,
    pub horizon: usize,
    pub epsilon: f64,
    pub reward_samples: usize,
    pub binary_reward: bool,
    pub seed: u64,
}

/// One simulated episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub user: usize,
    pub transitions: Vec<Transition>,
    /// World-model training window built from the episode.
    pub window: Window,
    /// Sum of TD rewards.
    pub reward: f64,
}

/// Rolls one episode per start against the world model. Each user draws from
/// its own rng stream, so results do not depend on scheduling.
pub fn collect_trajectories(wm: &WorldModel, globals: &Globals<'_>, policy: &QNetwork, starts: &[EpisodeStart], opts: &CollectOptions) -> Result<Vec<Rollout>> {
    let candidates: Vec<usize> = (0..policy.config.n_items).collect();
    starts
        .par_iter()
        .map(|start| {
            let mut rng = rng_for(opts.seed, &[start.user as u64]);
            let mut history = start.history.clone();
            let mut prev = start.prev;
            let mut state = start.state.clone();
            let mut transitions = Vec::with_capacity(opts.horizon);
            let mut steps = Vec::with_capacity(opts.horizon);
            let mut total = 0.0;
            for t in 0..opts.horizon {
                let obs = Observation::new(history.clone(), start.user as u64);
                let scores = policy.scores(&obs)?;
                let action = select_action(&scores, &candidates, opts.epsilon, &mut rng)?;
                let (p, s_t) = wm.debiased_feedback(globals, start.user, &prev, &state, opts.bucket, action, opts.reward_samples, Some(&mut rng))?;
                let feedback = u8::from(rng.random::<f64>() < p);
                let reward = if opts.binary_reward { feedback as f64 } else { p };
                total += reward;
                history.push((action, feedback));
                let keep = history.len().saturating_sub(policy.config.memory_size);
                history.drain(..keep);
                transitions.push(Transition {
                    obs,
                    action,
                    reward,
                    feedback,
                    next_obs: Observation::new(history.clone(), start.user as u64),
                    done: t + 1 == opts.horizon,
                });
                prev = Step {
                    bucket: opts.bucket,
                    item: action,
                    feedback,
                };
                steps.push(prev);
                state = s_t;
            }
            Ok(Rollout {
                user: start.user,
                transitions,
                window: Window {
                    user: start.user,
                    start_state: start.state.clone(),
                    prev: start.prev,
                    steps,
                },
                reward: total,
            })
        })
        .collect()
}

/// Logged transitions for offline training: the observation before each
/// record, the logged item as action and its feedback as reward.
pub fn logged_transitions(ds: &LoggedDataset, memory_size: usize) -> Vec<Transition> {
    let mut out = Vec::with_capacity(ds.num_records());
    for (u, recs) in ds.user_records.iter().enumerate() {
        let mut history: Vec<HistoryEntry> = Vec::new();
        for (j, r) in recs.iter().enumerate() {
            let obs = Observation::new(history.clone(), u as u64);
            history.push((r.item, r.feedback));
            let keep = history.len().saturating_sub(memory_size);
            history.drain(..keep);
            out.push(Transition {
                obs,
                action: r.item,
                reward: r.feedback as f64,
                feedback: r.feedback,
                next_obs: Observation::new(history.clone(), u as u64),
                done: j + 1 == recs.len(),
            });
        }
    }
    out
}

/// Items each user interacted with in the log.
pub fn known_items(ds: &LoggedDataset) -> Vec<Vec<bool>> {
    ds.user_records
        .iter()
        .map(|recs| {
            let mut k = vec![false; ds.n_items];
            for r in recs {
                k[r.item] = true;
            }
            k
        })
        .collect()
}

/// Output of a training run.
pub struct TrainedRun {
    pub manifest: RunManifest,
    pub world_model: Option<WorldModel>,
    pub policy: Option<QNetwork>,
}

/// Runs the configured variant end to end. Writes checkpoints and the
/// manifest when `out` is given; on failure a partial manifest is written.
pub fn run(cfg: &TrainConfig, ds: &LoggedDataset, out: Option<&Path>) -> Result<TrainedRun> {
    run_with(cfg, ds, None, out)
}

/// As [`run`], reusing an already pretrained world model and its curve.
pub fn run_with(cfg: &TrainConfig, ds: &LoggedDataset, pretrained: Option<(WorldModel, Vec<f64>)>, out: Option<&Path>) -> Result<TrainedRun> {
    cfg.validate()?;
    let started = Instant::now();
    let mut manifest = RunManifest::new(cfg);
    let result = run_phases(cfg, ds, pretrained, &mut manifest);
    manifest.wall_clock_secs = started.elapsed().as_secs_f64();
    match result {
        Ok((wm, policy)) => {
            if let Some(dir) = out {
                std::fs::create_dir_all(dir)?;
                if let Some(wm) = &wm {
                    let p = dir.join("world_model.ckpt");
                    wm.save(&p)?;
                    manifest.checkpoints.insert("world_model".into(), p);
                }
                if let Some(q) = &policy {
                    let p = dir.join("policy.ckpt");
                    q.save(&p)?;
                    manifest.checkpoints.insert("policy".into(), p);
                }
                manifest.write(dir)?;
            }
            Ok(TrainedRun {
                manifest,
                world_model: wm,
                policy,
            })
        }
        Err(e) => {
            manifest.error = Some(e.to_string());
            if let Some(dir) = out {
                manifest.write(dir)?;
            }
            Err(e)
        }
    }
}

fn new_policy(cfg: &TrainConfig, ds: &LoggedDataset) -> Result<QNetwork> {
    let mut q = QNetwork::new(
        PolicyConfig {
            n_items: ds.n_items,
            dim: cfg.dim,
            memory_size: cfg.memory_size,
            encoder: cfg.variant.encoder(),
        },
        derive_seed(cfg.seed, &[0x9a]),
    )?;
    if cfg.variant == Variant::DqnNaiveNeg {
        q.set_known_items(known_items(ds));
    }
    Ok(q)
}

fn run_phases(
    cfg: &TrainConfig,
    ds: &LoggedDataset,
    pretrained: Option<(WorldModel, Vec<f64>)>,
    manifest: &mut RunManifest,
) -> Result<(Option<WorldModel>, Option<QNetwork>)> {
    match cfg.variant {
        Variant::Random => Ok((None, None)),
        Variant::DmirD => {
            let transitions = logged_transitions(ds, cfg.memory_size);
            let mut buffer = ReplayBuffer::new(cfg.buffer.max(transitions.len()));
            for t in transitions {
                buffer.push(t);
            }
            let mut dqn = cfg.dqn();
            dqn.update_size = dqn.update_size.min(buffer.len());
            let mut learner = DqnLearner::new(new_policy(cfg, ds)?, dqn);
            let mut rng = rng_for(cfg.seed, &[0x0ff]);
            for l in 0..cfg.episodes {
                let curve = learner.train(&buffer, cfg.k_q, &mut rng)?;
                manifest.log(Phase::Offline, Some(l), curve.len());
                manifest.curves.policy.extend(curve);
            }
            Ok((None, Some(learner.net)))
        }
        _ => {
            let (mut wm, curve) = match pretrained {
                Some(p) => p,
                None => pretrain_world_model(ds, cfg)?,
            };
            manifest.log(Phase::Pretrain, None, curve.len());
            manifest.curves.pretrain = curve;
            let policy = model_based_loop(cfg, ds, &mut wm, manifest)?;
            Ok((Some(wm), Some(policy)))
        }
    }
}

fn model_based_loop(cfg: &TrainConfig, ds: &LoggedDataset, wm: &mut WorldModel, manifest: &mut RunManifest) -> Result<QNetwork> {
    let globals = Globals::of(ds);
    let mut learner = DqnLearner::new(new_policy(cfg, ds)?, cfg.dqn());
    let mut buffer = ReplayBuffer::new(cfg.buffer);
    let mut elbo = ElboTrainer::new(cfg.elbo());
    let mut rng = rng_for(cfg.seed, &[0x100]);
    let bucket = ds.last_bucket();
    for l in 0..cfg.episodes {
        let starts = sampled_episode_starts(wm, ds, cfg.memory_size, derive_seed(cfg.seed, &[0x102, l as u64]))?;
        let opts = CollectOptions {
            bucket,
            horizon: cfg.horizon,
            epsilon: epsilon_schedule(cfg.epsilon_start, cfg.epsilon_end, cfg.epsilon_decay, l, cfg.episodes),
            reward_samples: cfg.reward_samples,
            binary_reward: cfg.binary_reward,
            seed: derive_seed(cfg.seed, &[0x101, l as u64]),
        };
        let rollouts = collect_trajectories(wm, &globals, &learner.net, &starts, &opts)?;
        let n = rollouts.len().max(1) as f64;
        manifest.curves.episode_reward.push(rollouts.iter().map(|r| r.reward).sum::<f64>() / n);
        // the simulated set holds only this loop's episodes
        let mut simulated = Vec::with_capacity(rollouts.len());
        let mut count = 0;
        for r in rollouts {
            count += r.transitions.len();
            for t in r.transitions {
                buffer.push(t);
            }
            simulated.push(r.window);
        }
        manifest.log(Phase::Collect, Some(l), count);

        let curve = learner.train(&buffer, cfg.k_q, &mut rng)?;
        manifest.log(Phase::Policy, Some(l), curve.len());
        manifest.curves.policy.extend(curve);

        let k = cfg.finetune_steps();
        let curve = if k > 0 && simulated.iter().any(|w| !w.steps.is_empty()) {
            elbo.train_windows(wm, &globals, &simulated, k, &mut rng)?
        } else {
            Vec::new()
        };
        manifest.log(Phase::Finetune, Some(l), curve.len());
        manifest.curves.finetune.extend(curve);

        if converged(&manifest.curves.episode_reward, cfg.convergence_tol, cfg.convergence_loops) {
            manifest.converged_at = Some(l);
            log::info!("mean episode reward converged after loop {l}");
            break;
        }
    }
    Ok(learner.net)
}

/// True when each of the last `loops` values changed by less than `tol`
/// relative to its predecessor.
pub fn converged(rewards: &[f64], tol: f64, loops: usize) -> bool {
    if rewards.len() < loops + 1 {
        return false;
    }
    rewards[rewards.len() - loops - 1..]
        .windows(2)
        .all(|w| (w[1] - w[0]).abs() <= tol * w[0].abs().max(f64::MIN_POSITIVE))
}
