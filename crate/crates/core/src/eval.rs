//! Online evaluation against the ground-truth simulator: interaction metrics,
//! variant runners and report files.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LoggedDataset;
use crate::env::{GroundTruthEnv, MfModel};
use crate::error::{Error, Result};
use crate::policy::{select_action, Observation, QNetwork};
use crate::rng::{derive_seed, rng_for};
use crate::trainer::{logged_history, pretrain_world_model, run_with, TrainConfig, Variant};

pub const DEFAULT_KS: [usize; 2] = [20, 50];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStep {
    pub item: usize,
    pub accept_probability: f64,
    pub feedback: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub user: usize,
    pub seed: u64,
    pub steps: Vec<EpisodeStep>,
}

impl EpisodeLog {
    /// Sum of sampled feedback.
    pub fn cumulative_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.feedback as f64).sum()
    }

    /// Sum of acceptance probabilities.
    pub fn expected_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.accept_probability).sum()
    }

    /// Deterministic text transcript, one step per line.
    pub fn transcript(&self) -> String {
        let mut s = format!("user {} seed {}\n", self.user, self.seed);
        for (t, st) in self.steps.iter().enumerate() {
            s.push_str(&format!("{t} {} {:.17e} {}\n", st.item, st.accept_probability, st.feedback));
        }
        s
    }
}

fn check_k(logs: &[EpisodeLog], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Contract("K must be positive".into()));
    }
    if let Some(l) = logs.iter().find(|l| l.steps.len() < k) {
        return Err(Error::Contract(format!("K = {k} exceeds the episode length {} of user {}", l.steps.len(), l.user)));
    }
    Ok(())
}

fn mean_over(logs: &[EpisodeLog], f: impl Fn(&EpisodeLog) -> f64) -> f64 {
    if logs.is_empty() {
        return 0.0;
    }
    logs.iter().map(f).sum::<f64>() / logs.len() as f64
}

/// Fraction of accepted recommendations among the first `k` steps, averaged
/// over users.
pub fn hr_at_k(logs: &[EpisodeLog], k: usize) -> Result<f64> {
    check_k(logs, k)?;
    Ok(mean_over(logs, |l| l.steps[..k].iter().filter(|s| s.feedback == 1).count() as f64 / k as f64))
}

/// DCG over the first `k` steps (gain = feedback, discount `1/log2(pos+1)`)
/// divided by the ideal DCG for the same number of hits.
pub fn ndcg_at_k(logs: &[EpisodeLog], k: usize) -> Result<f64> {
    check_k(logs, k)?;
    Ok(mean_over(logs, |l| {
        let mut dcg = 0.0;
        let mut hits = 0;
        for (i, s) in l.steps[..k].iter().enumerate() {
            if s.feedback == 1 {
                dcg += 1.0 / ((i + 2) as f64).log2();
                hits += 1;
            }
        }
        if hits == 0 {
            return 0.0;
        }
        let idcg: f64 = (0..hits).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
        dcg / idcg
    }))
}

/// Distinct items over total recommendations, averaged over users.
pub fn diversity(logs: &[EpisodeLog]) -> f64 {
    mean_over(logs, |l| {
        if l.steps.is_empty() {
            return 0.0;
        }
        let mut items: Vec<usize> = l.steps.iter().map(|s| s.item).collect();
        items.sort_unstable();
        items.dedup();
        items.len() as f64 / l.steps.len() as f64
    })
}

/// Harmonic mean of hit ratio and diversity.
pub fn f_measure(hr: f64, diversity: f64) -> f64 {
    if hr + diversity == 0.0 {
        0.0
    } else {
        2.0 * hr * diversity / (hr + diversity)
    }
}

/// Mean cumulative reward after each step.
pub fn reward_curve(logs: &[EpisodeLog]) -> Vec<f64> {
    let h = logs.iter().map(|l| l.steps.len()).max().unwrap_or(0);
    let mut curve = vec![0.0; h];
    for l in logs {
        let mut acc = 0.0;
        for (t, c) in curve.iter_mut().enumerate() {
            if let Some(s) = l.steps.get(t) {
                acc += s.feedback as f64;
            }
            *c += acc;
        }
    }
    let n = logs.len().max(1) as f64;
    curve.iter().map(|c| c / n).collect()
}

/// Decision rule used during evaluation.
#[derive(Clone, Copy)]
pub enum EvalPolicy<'a> {
    Random,
    Greedy(&'a QNetwork),
}

/// Simulator handle shared by evaluation episodes.
#[derive(Clone, Debug)]
pub struct EvalEnv {
    pub model: Arc<MfModel>,
    pub alpha: f64,
}

/// One episode per user; each `(user, seed)` pair has its own simulator
/// session and rng, so logs do not depend on scheduling.
pub fn rollout_episodes(env: &EvalEnv, ds: &LoggedDataset, policy: EvalPolicy<'_>, users: &[usize], horizon: usize, seed: u64) -> Result<Vec<EpisodeLog>> {
    let n_items = env.model.n_items;
    let candidates: Vec<usize> = (0..n_items).collect();
    users
        .par_iter()
        .map(|&user| {
            let mut sim = GroundTruthEnv::new(env.model.clone(), env.alpha, horizon, derive_seed(seed, &[user as u64]))?;
            let mut rng = rng_for(seed, &[0x7a, user as u64]);
            let memory = match policy {
                EvalPolicy::Greedy(q) => q.config.memory_size,
                EvalPolicy::Random => 0,
            };
            let mut history = logged_history(ds, user, memory);
            let mut steps = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let item = match policy {
                    EvalPolicy::Random => rng.random_range(0..n_items),
                    EvalPolicy::Greedy(q) => {
                        let scores = q.scores(&Observation::new(history.clone(), user as u64))?;
                        select_action(&scores, &candidates, 0.0, &mut rng)?
                    }
                };
                let r = sim.step(user, item)?;
                steps.push(EpisodeStep {
                    item,
                    accept_probability: r.accept_probability,
                    feedback: r.feedback,
                });
                if memory > 0 {
                    history.push((item, r.feedback));
                    let keep = history.len().saturating_sub(memory);
                    history.drain(..keep);
                }
            }
            Ok(EpisodeLog { user, seed, steps })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub diversity: f64,
    /// Harmonic mean of diversity and the hit ratio at the smallest K.
    pub f_measure: f64,
    pub cumulative_reward: f64,
    pub expected_reward: f64,
    pub curve: Vec<f64>,
}

pub fn seed_metrics(logs: &[EpisodeLog], seed: u64, ks: &[usize]) -> Result<SeedMetrics> {
    if ks.is_empty() {
        return Err(Error::Contract("at least one K is required".into()));
    }
    let mut hr = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in ks {
        hr.insert(k, hr_at_k(logs, k)?);
        ndcg.insert(k, ndcg_at_k(logs, k)?);
    }
    let div = diversity(logs);
    let k0 = *ks.iter().min().expect("non-empty");
    Ok(SeedMetrics {
        seed,
        f_measure: f_measure(hr[&k0], div),
        hr,
        ndcg,
        diversity: div,
        cumulative_reward: mean_over(logs, EpisodeLog::cumulative_reward),
        expected_reward: mean_over(logs, EpisodeLog::expected_reward),
        curve: reward_curve(logs),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (0 for fewer than two values).
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: Variant,
    pub horizon: usize,
    pub ks: Vec<usize>,
    pub per_seed: Vec<SeedMetrics>,
    pub summary: BTreeMap<String, MeanStd>,
}

impl MetricReport {
    pub fn new(variant: Variant, horizon: usize, ks: &[usize], per_seed: Vec<SeedMetrics>) -> Self {
        let mut summary = BTreeMap::new();
        let col = |f: &dyn Fn(&SeedMetrics) -> f64| MeanStd::of(&per_seed.iter().map(f).collect::<Vec<_>>());
        summary.insert("f_measure".into(), col(&|m| m.f_measure));
        summary.insert("diversity".into(), col(&|m| m.diversity));
        for &k in ks {
            summary.insert(format!("hr@{k}"), col(&|m| m.hr[&k]));
            summary.insert(format!("ndcg@{k}"), col(&|m| m.ndcg[&k]));
        }
        summary.insert("cumulative_reward".into(), col(&|m| m.cumulative_reward));
        summary.insert("expected_reward".into(), col(&|m| m.expected_reward));
        Self {
            variant,
            horizon,
            ks: ks.to_vec(),
            per_seed,
            summary,
        }
    }

    pub fn mean_reward(&self) -> MeanStd {
        self.summary["cumulative_reward"]
    }

    pub fn seed_rewards(&self) -> Vec<f64> {
        self.per_seed.iter().map(|m| m.cumulative_reward).collect()
    }

    /// Mean cumulative-reward curve across seeds.
    pub fn curve(&self) -> Vec<f64> {
        let h = self.per_seed.iter().map(|m| m.curve.len()).max().unwrap_or(0);
        let n = self.per_seed.len().max(1) as f64;
        (0..h)
            .map(|t| self.per_seed.iter().map(|m| m.curve.get(t).copied().unwrap_or(0.0)).sum::<f64>() / n)
            .collect()
    }
}

/// Reference row for display next to desk results: full-scale scores
/// reported on the Ciao dataset (F-measure, Diversity, HR@20, HR@50, NDCG@20,
/// NDCG@50). Never used as a threshold.
pub const CIAO_REFERENCE_ROW: [f64; 6] = [0.4076, 0.3440, 0.5000, 0.3722, 0.5244, 0.4183];

/// Trains (per seed) and evaluates several variants. Model-based variants of
/// the same seed share one pretrained world model.
pub fn run_suite(
    variants: &[Variant],
    ds: &LoggedDataset,
    env: &EvalEnv,
    base: &TrainConfig,
    horizon: usize,
    seeds: &[u64],
    ks: &[usize],
) -> Result<Vec<MetricReport>> {
    let users: Vec<usize> = (0..ds.n_users).collect();
    let mut per_variant: BTreeMap<Variant, Vec<SeedMetrics>> = BTreeMap::new();
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let pretrained = if variants.iter().any(|v| v.uses_world_model()) {
            Some(pretrain_world_model(ds, &cfg)?)
        } else {
            None
        };
        for &v in variants {
            let mut vc = cfg.clone();
            vc.variant = v;
            let wm = if v.uses_world_model() { pretrained.clone() } else { None };
            let trained = run_with(&vc, ds, wm, None)?;
            let policy = match &trained.policy {
                Some(q) => EvalPolicy::Greedy(q),
                None => EvalPolicy::Random,
            };
            let logs = rollout_episodes(env, ds, policy, &users, horizon, derive_seed(seed, &[0xe7a1]))?;
            let m = seed_metrics(&logs, seed, ks)?;
            log::info!("{v} seed {seed}: cumulative reward {:.3}", m.cumulative_reward);
            per_variant.entry(v).or_default().push(m);
        }
    }
    Ok(variants
        .iter()
        .map(|&v| MetricReport::new(v, horizon, ks, per_variant.remove(&v).unwrap_or_default()))
        .collect())
}

/// Single-variant evaluation.
pub fn run_eval(variant: Variant, ds: &LoggedDataset, env: &EvalEnv, base: &TrainConfig, horizon: usize, seeds: &[u64], ks: &[usize]) -> Result<MetricReport> {
    Ok(run_suite(&[variant], ds, env, base, horizon, seeds, ks)?.remove(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

/// Writes reports as JSON (array of reports) or CSV (one row per variant and
/// seed, columns in table order).
pub fn emit_report(reports: &[MetricReport], path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    match format {
        ReportFormat::Json => {
            std::fs::write(path, serde_json::to_string_pretty(reports)?)?;
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            let ks = reports.first().map(|r| r.ks.clone()).unwrap_or_default();
            let mut header = vec!["variant".to_string(), "seed".into(), "f_measure".into(), "diversity".into()];
            header.extend(ks.iter().map(|k| format!("hr@{k}")));
            header.extend(ks.iter().map(|k| format!("ndcg@{k}")));
            header.push("cumulative_reward".into());
            w.write_record(&header)?;
            for r in reports {
                for m in &r.per_seed {
                    let mut row = vec![r.variant.name().to_string(), m.seed.to_string(), fmt4(m.f_measure), fmt4(m.diversity)];
                    row.extend(ks.iter().map(|k| fmt4(m.hr.get(k).copied().unwrap_or(f64::NAN))));
                    row.extend(ks.iter().map(|k| fmt4(m.ndcg.get(k).copied().unwrap_or(f64::NAN))));
                    row.push(fmt4(m.cumulative_reward));
                    w.write_record(&row)?;
                }
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

pub fn read_json_report(path: impl AsRef<Path>) -> Result<Vec<MetricReport>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// `variant,step,cumulative_reward` with the seed-averaged curve.
pub fn write_curves(reports: &[MetricReport], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "step", "cumulative_reward"])?;
    for r in reports {
        for (t, v) in r.curve().iter().enumerate() {
            w.write_record([r.variant.name().to_string(), (t + 1).to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `report.json`, `report.csv` and `curves.csv` in `dir`.
pub fn write_reports(reports: &[MetricReport], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    emit_report(reports, dir.join("report.json"), ReportFormat::Json)?;
    emit_report(reports, dir.join("report.csv"), ReportFormat::Csv)?;
    write_curves(reports, dir.join("curves.csv"))
}

/// Plain-text table in the column order F-measure, Diversity, HR@K.., NDCG@K..
pub fn format_table(reports: &[MetricReport]) -> String {
    let ks = reports.first().map(|r| r.ks.clone()).unwrap_or_default();
    let mut out = format!("{:<14} {:>9} {:>9}", "variant", "F", "Div");
    for k in &ks {
        out.push_str(&format!(" {:>9}", format!("HR@{k}")));
    }
    for k in &ks {
        out.push_str(&format!(" {:>9}", format!("NDCG@{k}")));
    }
    out.push_str(&format!(" {:>14}\n", "reward"));
    for r in reports {
        let s = &r.summary;
        out.push_str(&format!("{:<14} {:>9.4} {:>9.4}", r.variant.name(), s["f_measure"].mean, s["diversity"].mean));
        for k in &ks {
            out.push_str(&format!(" {:>9.4}", s[&format!("hr@{k}")].mean));
        }
        for k in &ks {
            out.push_str(&format!(" {:>9.4}", s[&format!("ndcg@{k}")].mean));
        }
        let rw = s["cumulative_reward"];
        out.push_str(&format!(" {:>7.3}±{:<6.3}\n", rw.mean, rw.std));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_of(feedback: &[u8], items: &[usize]) -> EpisodeLog {
        EpisodeLog {
            user: 0,
            seed: 0,
            steps: feedback
                .iter()
                .zip(items)
                .map(|(&f, &item)| EpisodeStep {
                    item,
                    accept_probability: 0.5,
                    feedback: f,
                })
                .collect(),
        }
    }

    #[test]
    fn hit_ratio_examples() {
        let items: Vec<usize> = (0..20).collect();
        assert_eq!(hr_at_k(&[log_of(&[1; 20], &items)], 20).unwrap(), 1.0);
        assert_eq!(hr_at_k(&[log_of(&[0; 20], &items)], 20).unwrap(), 0.0);
        let mut f = [0u8; 20];
        f[2] = 1;
        f[7] = 1;
        f[19] = 1;
        assert!((hr_at_k(&[log_of(&f, &items)], 20).unwrap() - 0.15).abs() < 1e-15);
        assert!(matches!(hr_at_k(&[log_of(&f, &items)], 0), Err(Error::Contract(_))));
        assert!(matches!(hr_at_k(&[log_of(&f, &items)], 21), Err(Error::Contract(_))));
    }

    #[test]
    fn ndcg_examples() {
        let items: Vec<usize> = (0..20).collect();
        assert!((ndcg_at_k(&[log_of(&[1; 20], &items)], 20).unwrap() - 1.0).abs() < 1e-15);
        let mut f = [0u8; 20];
        f[0] = 1;
        assert_eq!(ndcg_at_k(&[log_of(&f, &items)], 20).unwrap(), 1.0);
        let mut f = [0u8; 20];
        f[2] = 1;
        assert!((ndcg_at_k(&[log_of(&f, &items)], 20).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(ndcg_at_k(&[log_of(&[0; 20], &items)], 20).unwrap(), 0.0);
    }

    #[test]
    fn diversity_and_f_measure_examples() {
        let distinct: Vec<usize> = (0..20).collect();
        assert_eq!(diversity(&[log_of(&[0; 20], &distinct)]), 1.0);
        assert_eq!(diversity(&[log_of(&[0; 8], &[3; 8])]), 1.0 / 8.0);
        let twelve: Vec<usize> = (0..20).map(|i| i % 12).collect();
        assert!((diversity(&[log_of(&[0; 20], &twelve)]) - 0.6).abs() < 1e-15);
        assert_eq!(f_measure(1.0, 1.0), 1.0);
        assert_eq!(f_measure(0.7, 0.0), 0.0);
        assert_eq!(f_measure(0.0, 0.0), 0.0);
        assert!((f_measure(0.5, 0.25) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn curve_is_non_decreasing() {
        let c = reward_curve(&[log_of(&[1, 0, 1, 1], &[0, 1, 2, 3]), log_of(&[0, 0, 1, 0], &[0, 1, 2, 3])]);
        assert_eq!(c, vec![0.5, 0.5, 1.5, 2.0]);
    }

    #[test]
    fn report_files_round_trip() {
        let items: Vec<usize> = (0..20).collect();
        let logs = vec![log_of(&[1; 20], &items)];
        let m = seed_metrics(&logs, 3, &[10, 20]).unwrap();
        let reports = vec![
            MetricReport::new(Variant::Dmir, 20, &[10, 20], vec![m.clone(), m.clone()]),
            MetricReport::new(Variant::Random, 20, &[10, 20], vec![m.clone(), m]),
        ];
        let dir = tempfile::tempdir().unwrap();
        write_reports(&reports, dir.path()).unwrap();
        assert_eq!(read_json_report(dir.path().join("report.json")).unwrap(), reports);
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 4);
        assert!(csv.starts_with("variant,seed,f_measure,diversity,hr@10,hr@20,ndcg@10,ndcg@20,cumulative_reward"));
    }
}
