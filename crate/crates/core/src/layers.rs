//! Network building blocks on top of the tape.
//!
//! Weights are initialised uniformly in `±1/sqrt(fan_in)`.

use rand::Rng;

use crate::autodiff::{Graph, NodeId, Segment};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn uniform_init<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), uniform_init(rng, in_dim, out_dim, in_dim))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), uniform_init(rng, 1, out_dim, in_dim))?)
        } else {
            None
        };
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    /// `x[r, in] W[in, out] + b[1, out]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        if g.value(x).cols() != self.in_dim {
            return Err(Error::dim("Linear", &[self.in_dim], &[g.value(x).cols()]));
        }
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Gated recurrent unit:
///
/// ```text
/// z  = sigmoid(x Wz + h Uz + bz)
/// r  = sigmoid(x Wr + h Ur + br)
/// n  = tanh(x Wn + (r * h) Un + bn)
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub wz: ParamId,
    pub uz: ParamId,
    pub bz: ParamId,
    pub wr: ParamId,
    pub ur: ParamId,
    pub br: ParamId,
    pub wn: ParamId,
    pub un: ParamId,
    pub bn: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan = hidden_dim;
        let mut mk = |suffix: &str, rows: usize| {
            store.add(format!("{name}.{suffix}"), uniform_init(rng, rows, hidden_dim, fan))
        };
        Ok(Self {
            wz: mk("wz", input_dim)?,
            uz: mk("uz", hidden_dim)?,
            bz: mk("bz", 1)?,
            wr: mk("wr", input_dim)?,
            ur: mk("ur", hidden_dim)?,
            br: mk("br", 1)?,
            wn: mk("wn", input_dim)?,
            un: mk("un", hidden_dim)?,
            bn: mk("bn", 1)?,
            input_dim,
            hidden_dim,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.wz, self.uz, self.bz, self.wr, self.ur, self.br, self.wn, self.un, self.bn]
    }

    /// One batched step: `x[B, input_dim]`, `h[B, hidden_dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, h: NodeId) -> Result<NodeId> {
        let (xv, hv) = (g.value(x), g.value(h));
        if xv.cols() != self.input_dim || hv.cols() != self.hidden_dim || xv.rows() != hv.rows() {
            return Err(Error::dim(
                "gru_cell",
                &[hv.rows(), self.input_dim, self.hidden_dim],
                &[xv.rows(), xv.cols(), hv.cols()],
            ));
        }
        let gate = |g: &mut Graph, w: ParamId, u: ParamId, b: ParamId, hin: NodeId| -> Result<NodeId> {
            let w = g.param(store, w);
            let u = g.param(store, u);
            let b = g.param(store, b);
            let xw = g.matmul(x, w)?;
            let hu = g.matmul(hin, u)?;
            let s = g.add(xw, hu)?;
            g.add(s, b)
        };
        let z_pre = gate(g, self.wz, self.uz, self.bz, h)?;
        let z = g.sigmoid(z_pre);
        let r_pre = gate(g, self.wr, self.ur, self.br, h)?;
        let r = g.sigmoid(r_pre);
        let rh = g.mul(r, h)?;
        let n_pre = gate(g, self.wn, self.un, self.bn, rh)?;
        let n = g.tanh(n_pre);
        // h' = n + z * (h - n)
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }

    /// Plain-tensor single step on `input[d_in]`, `hidden[d_h]`.
    pub fn step(&self, store: &ParamStore, input: &Tensor, hidden: &Tensor) -> Result<Tensor> {
        if input.len() != self.input_dim {
            return Err(Error::dim("gru_cell input", &[self.input_dim], &[input.len()]));
        }
        if hidden.len() != self.hidden_dim {
            return Err(Error::dim("gru_cell hidden", &[self.hidden_dim], &[hidden.len()]));
        }
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let h = g.input(hidden.clone());
        let out = self.forward(&mut g, store, x, h)?;
        Tensor::new(vec![self.hidden_dim], g.value(out).data().to_vec())
    }
}

/// Single-head scaled dot-product self-attention.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub dim: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, false, rng)?,
            key: Linear::new(store, &format!("{name}.k"), dim, dim, false, rng)?,
            value: Linear::new(store, &format!("{name}.v"), dim, dim, false, rng)?,
            dim,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value].iter().flat_map(|l| l.params()).collect()
    }

    /// Attention inside each segment of the stacked token matrix `x[N, dim]`.
    pub fn forward_segments(&self, g: &mut Graph, store: &ParamStore, x: NodeId, segs: &[Segment]) -> Result<NodeId> {
        if segs.is_empty() || g.value(x).rows() == 0 {
            return Err(Error::EmptySequence("self_attention"));
        }
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        g.segment_attention(q, k, v, segs, 1.0 / (self.dim as f64).sqrt())
    }

    /// Plain-tensor attention over one sequence `seq[L, dim]`.
    pub fn apply(&self, store: &ParamStore, seq: &Tensor) -> Result<Tensor> {
        if seq.is_empty() || seq.rows() == 0 {
            return Err(Error::EmptySequence("self_attention"));
        }
        if seq.cols() != self.dim {
            return Err(Error::dim("self_attention", &[self.dim], &[seq.cols()]));
        }
        let mut g = Graph::new();
        let x = g.input(seq.clone());
        let out = self.forward_segments(&mut g, store, x, &[Segment { start: 0, len: seq.rows() }])?;
        Ok(g.value(out).clone())
    }
}

/// `Linear -> ReLU -> dropout -> Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(store, &format!("{name}.inner"), in_dim, hidden, true, rng)?,
            outer: Linear::new(store, &format!("{name}.outer"), hidden, out_dim, true, rng)?,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.inner.params().into_iter().chain(self.outer.params()).collect()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        dropout: &mut Dropout<'_>,
    ) -> Result<NodeId> {
        let h = self.inner.forward(g, store, x)?;
        let h = g.relu(h);
        let h = dropout.apply(g, h)?;
        self.outer.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[1, dim], 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, dim]))?,
            dim,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        if g.value(x).cols() != self.dim {
            return Err(Error::dim("layer_norm", &[self.dim], &[g.value(x).cols()]));
        }
        let n = g.layer_norm_rows(x, LAYER_NORM_EPS);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let s = g.mul(n, gain)?;
        g.add(s, bias)
    }
}

/// Plain-tensor layer normalisation of a single vector.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = x.len();
    if d < 2 {
        return Err(Error::Contract(format!("layer_norm needs d >= 2, got {d}")));
    }
    if gain.len() != d || bias.len() != d {
        return Err(Error::dim("layer_norm", &[d], &[gain.len(), bias.len()]));
    }
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let n = g.layer_norm_rows(xi, LAYER_NORM_EPS);
    let gi = g.input(gain.clone());
    let bi = g.input(bias.clone());
    let s = g.mul(n, gi)?;
    let out = g.add(s, bi)?;
    Tensor::new(x.shape().to_vec(), g.value(out).data().to_vec())
}

/// Closed-form `KL(N(mu, diag sigma^2) || N(0, I)) = 0.5 sum(mu^2 + sigma^2 - ln sigma^2 - 1)`.
pub fn gaussian_kl_std(mu: &Tensor, sigma: &Tensor) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::dim("gaussian_kl_std", &[mu.len()], &[sigma.len()]));
    }
    if let Some(&bad) = sigma.data().iter().find(|&&s| s <= 0.0 || !s.is_finite()) {
        return Err(Error::Domain(format!("sigma must be positive, got {bad}")));
    }
    Ok(0.5
        * mu.data()
            .iter()
            .zip(sigma.data())
            .map(|(m, s)| m * m + s * s - (s * s).ln() - 1.0)
            .sum::<f64>())
}

/// Inverted dropout. Identity in eval mode or at rate 0.
pub struct Dropout<'r> {
    pub rate: f64,
    rng: Option<&'r mut dyn rand::RngCore>,
}

impl<'r> Dropout<'r> {
    pub fn train(rate: f64, rng: &'r mut dyn rand::RngCore) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn eval() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some() && self.rate > 0.0
    }

    pub fn apply(&mut self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        if !self.is_active() {
            return Ok(x);
        }
        let rate = self.rate;
        let rng = self.rng.as_mut().expect("checked");
        let xv = g.value(x);
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = g.input(Tensor::matrix(xv.rows(), xv.cols(), mask));
        g.mul(x, m)
    }
}
