#![allow(dead_code)]

pub mod metric_oracle;

use idmir::autodiff::Graph;
use idmir::data::synthetic::{generate, SyntheticSpec};
use idmir::data::LoggedDataset;
use idmir::gradcheck::{self, GradCheckReport, DEFAULT_STEP};
use idmir::layers::{Dropout, FeedForward, GruCell, LayerNorm, Linear, SelfAttention};
use idmir::params::ParamStore;
use idmir::policy::{EncoderKind, Observation, PolicyConfig, QNetwork, Transition};
use idmir::rng::rng_for;
use idmir::world_model::{full_windows, logged_sequences, Globals, WorldModel, WorldModelConfig};
use idmir::autodiff::Segment;
use idmir::Tensor;

/// Small log with every structural feature of the bundled one.
pub fn tiny_dataset() -> LoggedDataset {
    generate(&SyntheticSpec {
        n_users: 5,
        n_items: 6,
        n_communities: 2,
        records_per_user: 7,
        n_buckets: 3,
        bucket_span: 100,
        friends_per_user: 2,
        trending_per_bucket: 2,
        seed: 11,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn input(rows: usize, cols: usize, seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = rng_for(seed, &[]);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// `sum(tanh(out) * w)` with fixed `w`, so every output coordinate gets a
/// distinct gradient.
fn probe(g: &mut Graph, out: idmir::autodiff::NodeId, seed: u64) -> idmir::Result<idmir::autodiff::NodeId> {
    let v = g.value(out);
    let w = g.input(input(v.rows(), v.cols(), seed));
    let t = g.tanh(out);
    let m = g.mul(t, w)?;
    Ok(g.sum_all(m))
}

/// Central-difference checks for each layer type, the negative ELBO and the
/// TD loss of every encoder.
pub fn all_gradient_checks() -> Vec<(String, GradCheckReport)> {
    let mut out = Vec::new();
    let mut rng = rng_for(3, &[]);

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 3, 2, true, &mut rng).unwrap();
    let r = gradcheck::check(&mut store, None, DEFAULT_STEP, |g, s| {
        let x = g.input(input(4, 3, 1));
        let y = lin.forward(g, s, x)?;
        probe(g, y, 2)
    })
    .unwrap();
    out.push(("linear".to_string(), r));

    let mut store = ParamStore::new();
    let gru = GruCell::new(&mut store, "gru", 3, 2, &mut rng).unwrap();
    let r = gradcheck::check(&mut store, None, DEFAULT_STEP, |g, s| {
        let mut h = g.input(input(2, 2, 3));
        for k in 0..3 {
            let x = g.input(input(2, 3, 10 + k));
            h = gru.forward(g, s, x, h)?;
        }
        probe(g, h, 4)
    })
    .unwrap();
    out.push(("gru".to_string(), r));

    let mut store = ParamStore::new();
    let attn = SelfAttention::new(&mut store, "attn", 3, &mut rng).unwrap();
    let segs = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 2 }];
    let r = gradcheck::check(&mut store, None, DEFAULT_STEP, |g, s| {
        let x = g.input(input(5, 3, 5));
        let y = attn.forward_segments(g, s, x, &segs)?;
        let m = g.segment_mean(y, &segs)?;
        probe(g, m, 6)
    })
    .unwrap();
    out.push(("self_attention".to_string(), r));

    let mut store = ParamStore::new();
    let ffn = FeedForward::new(&mut store, "ffn", 3, 4, 2, &mut rng).unwrap();
    let r = gradcheck::check(&mut store, None, DEFAULT_STEP, |g, s| {
        let x = g.input(input(3, 3, 7));
        let y = ffn.forward(g, s, x, &mut Dropout::eval())?;
        probe(g, y, 8)
    })
    .unwrap();
    out.push(("feed_forward".to_string(), r));

    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
    // move gain and bias off their identity init
    for id in ln.params() {
        let t = input(1, 4, 9 + id.index() as u64);
        store.value_mut(id).data_mut().copy_from_slice(t.data());
    }
    let r = gradcheck::check(&mut store, None, DEFAULT_STEP, |g, s| {
        let x = g.input(input(3, 4, 12));
        let y = ln.forward(g, s, x)?;
        probe(g, y, 13)
    })
    .unwrap();
    out.push(("layer_norm".to_string(), r));

    out.push(("negative_elbo".to_string(), elbo_check()));
    for enc in [EncoderKind::Contrastive, EncoderKind::NaiveNegative, EncoderKind::FullSequence] {
        out.push((format!("td_loss_{enc:?}"), td_check(enc)));
    }
    out
}

pub fn tiny_world_model(ds: &LoggedDataset, seed: u64) -> WorldModel {
    let mut cfg = WorldModelConfig::new(ds.n_users, ds.n_items, 3);
    cfg.dropout = 0.0;
    WorldModel::new(cfg, seed).unwrap()
}

fn elbo_check() -> GradCheckReport {
    let ds = tiny_dataset();
    let globals = Globals::of(&ds);
    let mut wm = tiny_world_model(&ds, 1);
    let seqs = logged_sequences(&ds, wm.state_dim());
    let mut windows = full_windows(&wm, &globals, &seqs[..3]).unwrap();
    // uneven lengths exercise the mask
    windows[1].steps.truncate(2);
    let template = wm.clone();
    gradcheck::check(&mut wm.params, None, DEFAULT_STEP, |g, s| {
        let mut m = template.clone();
        m.params = s.clone();
        let mut noise = rng_for(5, &[]);
        let nodes = m.elbo_loss(g, &globals, &windows, Some(&mut noise), &mut Dropout::eval())?;
        Ok(nodes.total)
    })
    .unwrap()
}

pub fn td_batch(n_items: usize) -> Vec<Transition> {
    let hist = |v: &[(usize, u8)]| v.to_vec();
    vec![
        Transition {
            obs: Observation::new(hist(&[(0, 1), (2, 0), (3, 1)]), 0),
            action: 1,
            reward: 0.7,
            feedback: 1,
            next_obs: Observation::new(hist(&[(2, 0), (3, 1), (1, 1)]), 0),
            done: false,
        },
        Transition {
            obs: Observation::new(hist(&[(4, 0)]), 1),
            action: n_items - 1,
            reward: 0.2,
            feedback: 0,
            next_obs: Observation::new(hist(&[(4, 0), (n_items - 1, 0)]), 1),
            done: true,
        },
        Transition {
            obs: Observation::new(Vec::new(), 2),
            action: 0,
            reward: 1.0,
            feedback: 1,
            next_obs: Observation::new(hist(&[(0, 1)]), 2),
            done: false,
        },
    ]
}

fn td_check(encoder: EncoderKind) -> GradCheckReport {
    let n_items = 5;
    let mut net = QNetwork::new(PolicyConfig { n_items, dim: 3, memory_size: 3, encoder }, 4).unwrap();
    if encoder == EncoderKind::NaiveNegative {
        net.set_known_items(vec![vec![true, false, true, true, false]; 3]);
    }
    let batch = td_batch(n_items);
    let target = net.params.clone();
    let targets = net.td_targets(&target, &batch, 0.9, true).unwrap();
    let template = net.clone();
    gradcheck::check(&mut net.params, None, DEFAULT_STEP, |g, s| {
        let mut n = template.clone();
        n.params = s.clone();
        n.td_loss(g, &batch, &targets)
    })
    .unwrap()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
