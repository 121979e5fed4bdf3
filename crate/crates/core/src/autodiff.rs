//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so index order is a topological
//! order; [`Graph::backward`] walks it in reverse exactly once.
//!
//! Parameters enter the tape through [`Graph::param`] and their gradients are
//! accumulated back into the owning [`ParamStore`].

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};

/// Largest exponent accepted by [`Graph::exp_clamped`].
pub const EXP_CLAMP: f64 = 700.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous row range `[start, start + len)` of a stacked matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp { x: NodeId, clamp: bool },
    Log(NodeId),
    Softplus(NodeId),
    Square(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows { x: NodeId, eps: f64 },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize, len: usize },
    GatherRows { table: NodeId, idx: Vec<usize> },
    SegmentAttention { q: NodeId, k: NodeId, v: NodeId, segs: Vec<Segment>, scale: f64 },
    SegmentMean { x: NodeId, segs: Vec<Segment> },
    SumAll(NodeId),
    MeanAll(NodeId),
    SumCols(NodeId),
    KlStdNormal { mu: NodeId, sigma: NodeId },
    BceWithLogits { logits: NodeId, targets: Vec<f64> },
}

impl Op {
    /// Short tag used by graph audits.
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Exp { .. } => "exp",
            Op::Log(_) => "log",
            Op::Softplus(_) => "softplus",
            Op::Square(_) => "square",
            Op::SoftmaxRows(_) => "softmax",
            Op::LayerNormRows { .. } => "layer_norm",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::SegmentAttention { .. } => "attention",
            Op::SegmentMean { .. } => "segment_mean",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::SumCols(_) => "sum_cols",
            Op::KlStdNormal { .. } => "kl_std_normal",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x, _)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Log(x)
            | Op::Softplus(x)
            | Op::Square(x)
            | Op::SoftmaxRows(x)
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::SumCols(x) => vec![*x],
            Op::Exp { x, .. } | Op::LayerNormRows { x, .. } | Op::SliceRows { x, .. } => vec![*x],
            Op::SegmentMean { x, .. } => vec![*x],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::GatherRows { table, .. } => vec![*table],
            Op::SegmentAttention { q, k, v, .. } => vec![*q, *k, *v],
            Op::KlStdNormal { mu, sigma } => vec![*mu, *sigma],
            Op::BceWithLogits { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    /// Op-specific forward cache (softmax probabilities, inverse std, ...).
    aux: Vec<f64>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
    exp_clamped: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// How the right operand of an elementwise binary op is broadcast.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn bcast(a: &Tensor, b: &Tensor, ctx: &'static str) -> Result<Bcast> {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    if ar == br && ac == bc {
        Ok(Bcast::Same)
    } else if br == 1 && bc == ac {
        Ok(Bcast::Row)
    } else if bc == 1 && br == ar {
        Ok(Bcast::Col)
    } else if br == 1 && bc == 1 {
        Ok(Bcast::Scalar)
    } else {
        Err(Error::dim(ctx, &[ar, ac], &[br, bc]))
    }
}

#[inline]
fn bidx(mode: Bcast, i: usize, c: usize) -> usize {
    match mode {
        Bcast::Same => i,
        Bcast::Row => i % c,
        Bcast::Col => i / c,
        Bcast::Scalar => 0,
    }
}

fn reduce_bcast(mode: Bcast, g: &Tensor, b_shape: &[usize]) -> Tensor {
    let c = g.cols();
    let mut out = Tensor::zeros(b_shape);
    let o = out.data_mut();
    for (i, &gv) in g.data().iter().enumerate() {
        o[bidx(mode, i, c)] += gv;
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    /// True once any [`Graph::exp_clamped`] node hit the exponent clamp.
    pub fn exp_clamp_hit(&self) -> bool {
        self.exp_clamped
    }

    /// Nodes reachable from `root` (inclusive), in ascending index order.
    pub fn ancestors(&self, root: NodeId) -> Vec<NodeId> {
        let mut seen = vec![false; root.0 + 1];
        seen[root.0] = true;
        for i in (0..=root.0).rev() {
            if seen[i] {
                for p in self.nodes[i].op.parents() {
                    seen[p.0] = true;
                }
            }
        }
        (0..=root.0).filter(|&i| seen[i]).map(NodeId).collect()
    }

    /// Count of nodes of the given [`Op::kind`] that feed `root`.
    pub fn count_kind(&self, root: NodeId, kind: &str) -> usize {
        self.ancestors(root)
            .into_iter()
            .filter(|&id| self.nodes[id.0].op.kind() == kind)
            .count()
    }

    fn push(&mut self, op: Op, value: Tensor, aux: Vec<f64>) -> NodeId {
        debug_assert!(
            value.data().iter().all(|v| !v.is_nan()),
            "NaN produced by {}",
            op.kind()
        );
        self.nodes.push(Node { op, value, aux });
        NodeId(self.nodes.len() - 1)
    }

    fn v(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        let value = value.as_matrix();
        self.push(Op::Input, value, Vec::new())
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: f64) -> NodeId {
        self.input(Tensor::filled(&[rows, cols], value))
    }

    /// Leaf node for a parameter; each parameter appears at most once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if self.param_nodes.len() <= id.0 {
            self.param_nodes.resize(id.0 + 1, None);
        }
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let value = store.value(id).as_matrix();
        let n = self.push(Op::Param(id), value, Vec::new());
        self.param_nodes[id.0] = Some(n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.v(a), self.v(b));
        let (m, k, k2, n) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        if k != k2 {
            return Err(Error::dim("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        Ok(self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out), Vec::new()))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, ctx: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Bcast)> {
        let (av, bv) = (self.v(a), self.v(b));
        let mode = bcast(av, bv, ctx)?;
        let c = av.cols();
        let bd = bv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[bidx(mode, i, c)]))
            .collect();
        Ok((Tensor::matrix(av.rows(), c, data), mode))
    }

    /// Elementwise sum; `b` may be a row `[1,c]`, column `[r,1]` or `[1,1]` broadcast.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (t, _) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), t, Vec::new()))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (t, _) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), t, Vec::new()))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (t, _) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), t, Vec::new()))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let t = self.v(x).map(|v| v * s);
        self.push(Op::Scale(x, s), t, Vec::new())
    }

    pub fn add_scalar(&mut self, x: NodeId, s: f64) -> NodeId {
        let t = self.v(x).map(|v| v + s);
        self.push(Op::AddScalar(x, s), t, Vec::new())
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.scale(x, -1.0)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let t = self.v(x).map(sigmoid);
        self.push(Op::Sigmoid(x), t, Vec::new())
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let t = self.v(x).map(f64::tanh);
        self.push(Op::Tanh(x), t, Vec::new())
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let t = self.v(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), t, Vec::new())
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let t = self.v(x).map(f64::exp);
        self.push(Op::Exp { x, clamp: false }, t, Vec::new())
    }

    /// `exp(min(x, 700))`; records a flag when the clamp is active.
    pub fn exp_clamped(&mut self, x: NodeId) -> NodeId {
        if self.v(x).data().iter().any(|&v| v > EXP_CLAMP) {
            self.exp_clamped = true;
        }
        let t = self.v(x).map(|v| v.min(EXP_CLAMP).exp());
        self.push(Op::Exp { x, clamp: true }, t, Vec::new())
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let t = self.v(x).map(f64::ln);
        self.push(Op::Log(x), t, Vec::new())
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let t = self.v(x).map(softplus);
        self.push(Op::Softplus(x), t, Vec::new())
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let t = self.v(x).map(|v| v * v);
        self.push(Op::Square(x), t, Vec::new())
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.v(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(Op::SoftmaxRows(x), Tensor::matrix(r, c, out), Vec::new())
    }

    /// Row-wise `(x - mean) / sqrt(var + eps)` with population variance.
    pub fn layer_norm_rows(&mut self, x: NodeId, eps: f64) -> NodeId {
        let xv = self.v(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        for row in xv.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|v| (v - mean) * is));
        }
        self.push(Op::LayerNormRows { x, eps }, Tensor::matrix(r, c, out), inv_std)
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let r = self.v(xs[0]).rows();
        let widths: Vec<usize> = xs.iter().map(|&x| self.v(x).cols()).collect();
        for &x in xs {
            if self.v(x).rows() != r {
                return Err(Error::dim("concat_cols", &[r], &[self.v(x).rows()]));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &x in xs {
                out.extend_from_slice(self.v(x).row(i));
            }
        }
        Ok(self.push(Op::ConcatCols(xs.to_vec()), Tensor::matrix(r, total, out), Vec::new()))
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let c = self.v(xs[0]).cols();
        let mut out = Vec::new();
        let mut r = 0;
        for &x in xs {
            let xv = self.v(x);
            if xv.cols() != c {
                return Err(Error::dim("concat_rows", &[c], &[xv.cols()]));
            }
            r += xv.rows();
            out.extend_from_slice(xv.data());
        }
        Ok(self.push(Op::ConcatRows(xs.to_vec()), Tensor::matrix(r, c, out), Vec::new()))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.v(x);
        let c = xv.cols();
        if start + len > xv.rows() {
            return Err(Error::dim("slice_rows", &[xv.rows()], &[start + len]));
        }
        let data = xv.data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Op::SliceRows { x, start, len }, Tensor::matrix(len, c, data), Vec::new()))
    }

    /// Embedding lookup: row `idx[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> Result<NodeId> {
        let tv = self.v(table);
        let c = tv.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= tv.rows() {
                return Err(Error::Lookup { kind: "embedding row", id: i });
            }
            out.extend_from_slice(tv.row(i));
        }
        Ok(self.push(
            Op::GatherRows { table, idx: idx.to_vec() },
            Tensor::matrix(idx.len(), c, out),
            Vec::new(),
        ))
    }

    /// Single-head scaled dot-product attention applied independently inside
    /// each row segment of the stacked `q`, `k`, `v` matrices.
    pub fn segment_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, segs: &[Segment], scale: f64) -> Result<NodeId> {
        let (qv, kv, vv) = (self.v(q), self.v(k), self.v(v));
        let d = qv.cols();
        if kv.cols() != d || kv.rows() != qv.rows() || vv.rows() != qv.rows() {
            return Err(Error::dim("segment_attention", qv.shape(), kv.shape()));
        }
        let dv = vv.cols();
        let mut out = vec![0.0; qv.rows() * dv];
        let mut probs = Vec::new();
        for s in segs {
            if s.len == 0 {
                return Err(Error::EmptySequence("self_attention"));
            }
            let qs = &qv.data()[s.start * d..(s.start + s.len) * d];
            let ks = &kv.data()[s.start * d..(s.start + s.len) * d];
            let vs = &vv.data()[s.start * dv..(s.start + s.len) * dv];
            let mut sc = vec![0.0; s.len * s.len];
            matmul_bt_into(qs, ks, &mut sc, s.len, d, s.len);
            for row in sc.chunks_mut(s.len) {
                row.iter_mut().for_each(|v| *v *= scale);
                softmax_in_place(row);
            }
            matmul_into(&sc, vs, &mut out[s.start * dv..(s.start + s.len) * dv], s.len, s.len, dv);
            probs.extend_from_slice(&sc);
        }
        let rows = qv.rows();
        Ok(self.push(
            Op::SegmentAttention { q, k, v, segs: segs.to_vec(), scale },
            Tensor::matrix(rows, dv, out),
            probs,
        ))
    }

    /// Attention weights cached by a [`Graph::segment_attention`] node,
    /// concatenated segment by segment (row-major `len x len` blocks).
    pub fn attention_weights(&self, id: NodeId) -> Option<&[f64]> {
        match self.nodes[id.0].op {
            Op::SegmentAttention { .. } => Some(&self.nodes[id.0].aux),
            _ => None,
        }
    }

    /// Mean of each row segment; output has one row per segment.
    pub fn segment_mean(&mut self, x: NodeId, segs: &[Segment]) -> Result<NodeId> {
        let xv = self.v(x);
        let c = xv.cols();
        let mut out = Vec::with_capacity(segs.len() * c);
        for s in segs {
            if s.len == 0 || s.start + s.len > xv.rows() {
                return Err(Error::EmptySequence("segment_mean"));
            }
            let mut acc = vec![0.0; c];
            for r in s.start..s.start + s.len {
                for (a, v) in acc.iter_mut().zip(xv.row(r)) {
                    *a += v;
                }
            }
            out.extend(acc.into_iter().map(|a| a / s.len as f64));
        }
        Ok(self.push(
            Op::SegmentMean { x, segs: segs.to_vec() },
            Tensor::matrix(segs.len(), c, out),
            Vec::new(),
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.v(x).sum();
        self.push(Op::SumAll(x), Tensor::matrix(1, 1, vec![s]), Vec::new())
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = self.v(x);
        let s = xv.sum() / xv.len() as f64;
        self.push(Op::MeanAll(x), Tensor::matrix(1, 1, vec![s]), Vec::new())
    }

    /// Row sums as a `[r,1]` column.
    pub fn sum_cols(&mut self, x: NodeId) -> NodeId {
        let xv = self.v(x);
        let data: Vec<f64> = xv.data().chunks(xv.cols()).map(|r| r.iter().sum()).collect();
        let r = data.len();
        self.push(Op::SumCols(x), Tensor::matrix(r, 1, data), Vec::new())
    }

    /// Row-wise `KL(N(mu, diag sigma^2) || N(0, I))` as a `[r,1]` column.
    pub fn kl_std_normal(&mut self, mu: NodeId, sigma: NodeId) -> Result<NodeId> {
        let (mv, sv) = (self.v(mu), self.v(sigma));
        if mv.shape() != sv.shape() {
            return Err(Error::dim("kl_std_normal", mv.shape(), sv.shape()));
        }
        if let Some(&bad) = sv.data().iter().find(|&&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Domain(format!("sigma must be positive, got {bad}")));
        }
        let c = mv.cols();
        let data: Vec<f64> = mv
            .data()
            .chunks(c)
            .zip(sv.data().chunks(c))
            .map(|(m, s)| kl_row(m, s))
            .collect();
        let r = data.len();
        Ok(self.push(Op::KlStdNormal { mu, sigma }, Tensor::matrix(r, 1, data), Vec::new()))
    }

    /// Elementwise Bernoulli negative log-likelihood `softplus(l) - y l`.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        let lv = self.v(logits);
        if lv.len() != targets.len() {
            return Err(Error::dim("bce_with_logits", &[lv.len()], &[targets.len()]));
        }
        let data = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&l, &y)| softplus(l) - y * l)
            .collect();
        let t = Tensor::matrix(lv.rows(), lv.cols(), data);
        Ok(self.push(Op::BceWithLogits { logits, targets: targets.to_vec() }, t, Vec::new()))
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients are added into
    /// `store`; gradients of every node are returned.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.node_gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Param(pid), Some(g)) = (&node.op, &grads.grads[i]) {
                let p = store.get_mut(*pid);
                for (dst, src) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *dst += src;
                }
            }
        }
        Ok(grads)
    }

    /// Reverse pass without touching any parameter store.
    pub fn node_gradients(&self, loss: NodeId) -> Result<Gradients> {
        if self.v(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.v(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::matrix(1, 1, vec![1.0]));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.v(*a), self.v(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut da = vec![0.0; m * k];
                matmul_bt_into(g.data(), bv.data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                matmul_at_into(av.data(), g.data(), &mut db, m, k, n);
                accum(grads, *a, Tensor::matrix(m, k, da));
                accum(grads, *b, Tensor::matrix(k, n, db));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                accum(grads, *a, g.clone());
                let bv = self.v(*b);
                let mode = bcast(self.v(*a), bv, "add").expect("checked in forward");
                let mut db = reduce_bcast(mode, g, &[bv.rows(), bv.cols()]);
                if sign < 0.0 {
                    db.data_mut().iter_mut().for_each(|v| *v = -*v);
                }
                accum(grads, *b, db);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.v(*a), self.v(*b));
                let mode = bcast(av, bv, "mul").expect("checked in forward");
                let c = av.cols();
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(j, &gv)| gv * bv.data()[bidx(mode, j, c)])
                    .collect();
                let gb = Tensor::matrix(
                    g.rows(),
                    c,
                    g.data().iter().zip(av.data()).map(|(gv, x)| gv * x).collect(),
                );
                accum(grads, *a, Tensor::matrix(g.rows(), c, da));
                accum(grads, *b, reduce_bcast(mode, &gb, &[bv.rows(), bv.cols()]));
            }
            Op::Scale(x, s) => accum(grads, *x, g.map(|v| v * s)),
            Op::AddScalar(x, _) => accum(grads, *x, g.clone()),
            Op::Sigmoid(x) => accum(grads, *x, zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv))),
            Op::Tanh(x) => accum(grads, *x, zip_map(g, y, |gv, yv| gv * (1.0 - yv * yv))),
            Op::Relu(x) => {
                accum(grads, *x, zip_map(g, self.v(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }))
            }
            Op::Exp { x, clamp } => {
                let xv = self.v(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(xv.data())
                    .map(|((gv, yv), xv)| if *clamp && *xv > EXP_CLAMP { 0.0 } else { gv * yv })
                    .collect();
                accum(grads, *x, Tensor::matrix(g.rows(), g.cols(), data));
            }
            Op::Log(x) => accum(grads, *x, zip_map(g, self.v(*x), |gv, xv| gv / xv)),
            Op::Softplus(x) => accum(grads, *x, zip_map(g, self.v(*x), |gv, xv| gv * sigmoid(xv))),
            Op::Square(x) => accum(grads, *x, zip_map(g, self.v(*x), |gv, xv| 2.0 * xv * gv)),
            Op::SoftmaxRows(x) => {
                let c = y.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                accum(grads, *x, Tensor::matrix(y.rows(), c, dx));
            }
            Op::LayerNormRows { x, .. } => {
                let c = y.cols();
                let mut dx = Vec::with_capacity(y.len());
                for ((yr, gr), is) in y.data().chunks(c).zip(g.data().chunks(c)).zip(&node.aux) {
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    dx.extend(yr.iter().zip(gr).map(|(yv, gv)| is * (gv - mg - yv * mgy)));
                }
                accum(grads, *x, Tensor::matrix(y.rows(), c, dx));
            }
            Op::ConcatCols(xs) => {
                let mut off = 0;
                let total = y.cols();
                for &x in xs {
                    let w = self.v(x).cols();
                    let mut d = Vec::with_capacity(g.rows() * w);
                    for r in 0..g.rows() {
                        d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                    }
                    accum(grads, x, Tensor::matrix(g.rows(), w, d));
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let c = y.cols();
                let mut off = 0;
                for &x in xs {
                    let r = self.v(x).rows();
                    let d = g.data()[off * c..(off + r) * c].to_vec();
                    accum(grads, x, Tensor::matrix(r, c, d));
                    off += r;
                }
            }
            Op::SliceRows { x, start, len } => {
                let xv = self.v(*x);
                let c = xv.cols();
                let mut d = Tensor::zeros(&[xv.rows(), c]);
                d.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                accum(grads, *x, d);
            }
            Op::GatherRows { table, idx } => {
                let tv = self.v(*table);
                let c = tv.cols();
                let mut d = Tensor::zeros(&[tv.rows(), c]);
                let dd = d.data_mut();
                for (r, &ti) in idx.iter().enumerate() {
                    for j in 0..c {
                        dd[ti * c + j] += g.data()[r * c + j];
                    }
                }
                accum(grads, *table, d);
            }
            Op::SegmentAttention { q, k, v, segs, scale } => {
                let (qv, kv, vv) = (self.v(*q), self.v(*k), self.v(*v));
                let (n, d, dv) = (qv.rows(), qv.cols(), vv.cols());
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * d];
                let mut dvv = vec![0.0; n * dv];
                let mut poff = 0;
                for s in segs {
                    let l = s.len;
                    let p = &node.aux[poff..poff + l * l];
                    poff += l * l;
                    let go = &g.data()[s.start * dv..(s.start + l) * dv];
                    let vs = &vv.data()[s.start * dv..(s.start + l) * dv];
                    let qs = &qv.data()[s.start * d..(s.start + l) * d];
                    let ks = &kv.data()[s.start * d..(s.start + l) * d];
                    // dV = P^T dO
                    matmul_at_into(p, go, &mut dvv[s.start * dv..(s.start + l) * dv], l, l, dv);
                    // dP = dO V^T
                    let mut dp = vec![0.0; l * l];
                    matmul_bt_into(go, vs, &mut dp, l, dv, l);
                    // dS = P * (dP - rowsum(dP * P)), folded with the score scale
                    let mut ds = vec![0.0; l * l];
                    for r in 0..l {
                        let pr = &p[r * l..(r + 1) * l];
                        let dpr = &dp[r * l..(r + 1) * l];
                        let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                        for c in 0..l {
                            ds[r * l + c] = pr[c] * (dpr[c] - dot) * scale;
                        }
                    }
                    matmul_into(&ds, ks, &mut dq[s.start * d..(s.start + l) * d], l, l, d);
                    matmul_at_into(&ds, qs, &mut dk[s.start * d..(s.start + l) * d], l, l, d);
                }
                accum(grads, *q, Tensor::matrix(n, d, dq));
                accum(grads, *k, Tensor::matrix(n, d, dk));
                accum(grads, *v, Tensor::matrix(n, dv, dvv));
            }
            Op::SegmentMean { x, segs } => {
                let xv = self.v(*x);
                let c = xv.cols();
                let mut d = Tensor::zeros(&[xv.rows(), c]);
                let dd = d.data_mut();
                for (si, s) in segs.iter().enumerate() {
                    let inv = 1.0 / s.len as f64;
                    for r in s.start..s.start + s.len {
                        for j in 0..c {
                            dd[r * c + j] += g.data()[si * c + j] * inv;
                        }
                    }
                }
                accum(grads, *x, d);
            }
            Op::SumAll(x) => {
                let xv = self.v(*x);
                accum(grads, *x, Tensor::filled(&[xv.rows(), xv.cols()], g.item()));
            }
            Op::MeanAll(x) => {
                let xv = self.v(*x);
                accum(grads, *x, Tensor::filled(&[xv.rows(), xv.cols()], g.item() / xv.len() as f64));
            }
            Op::SumCols(x) => {
                let xv = self.v(*x);
                let c = xv.cols();
                let d = (0..xv.len()).map(|j| g.data()[j / c]).collect();
                accum(grads, *x, Tensor::matrix(xv.rows(), c, d));
            }
            Op::KlStdNormal { mu, sigma } => {
                let (mv, sv) = (self.v(*mu), self.v(*sigma));
                let c = mv.cols();
                let dmu = (0..mv.len()).map(|j| g.data()[j / c] * mv.data()[j]).collect();
                let ds = (0..sv.len())
                    .map(|j| {
                        let s = sv.data()[j];
                        g.data()[j / c] * (s - 1.0 / s)
                    })
                    .collect();
                accum(grads, *mu, Tensor::matrix(mv.rows(), c, dmu));
                accum(grads, *sigma, Tensor::matrix(sv.rows(), c, ds));
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = self.v(*logits);
                let d = g
                    .data()
                    .iter()
                    .zip(lv.data())
                    .zip(targets)
                    .map(|((gv, l), t)| gv * (sigmoid(*l) - t))
                    .collect();
                accum(grads, *logits, Tensor::matrix(lv.rows(), lv.cols(), d));
            }
        }
    }
}

fn zip_map(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::matrix(g.rows(), g.cols(), data)
}

fn accum(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn kl_row(mu: &[f64], sigma: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(sigma)
        .map(|(m, s)| m * m + s * s - (s * s).ln() - 1.0)
        .sum::<f64>()
}

pub fn logistic(x: f64) -> f64 {
    sigmoid(x)
}

pub fn softplus_f64(x: f64) -> f64 {
    softplus(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values.iter().map(|(n, t)| s.add(*n, t.clone()).unwrap()).collect();
        (s, ids)
    }

    #[test]
    fn quadratic_gradient_is_two_p() {
        let p = Tensor::vector(vec![1.5, -2.0, 0.25]);
        let (mut s, ids) = store_with(&[("p", p.clone())]);
        let mut g = Graph::new();
        let x = g.param(&s, ids[0]);
        let sq = g.square(x);
        let loss = g.sum_all(sq);
        g.backward(loss, &mut s).unwrap();
        let expected: Vec<f64> = p.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(s.grad(ids[0]).data(), expected.as_slice());
    }

    #[test]
    fn unused_parameter_gradient_is_exactly_zero() {
        let (mut s, ids) = store_with(&[
            ("used", Tensor::vector(vec![1.0, 2.0])),
            ("unused", Tensor::vector(vec![3.0, 4.0])),
        ]);
        let mut g = Graph::new();
        let x = g.param(&s, ids[0]);
        let _y = g.param(&s, ids[1]);
        let t = g.tanh(x);
        let loss = g.sum_all(t);
        g.backward(loss, &mut s).unwrap();
        assert!(s.grad(ids[1]).data().iter().all(|&v| v == 0.0));
        assert!(s.grad(ids[0]).data().iter().all(|&v| v != 0.0));
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let (mut s, ids) = store_with(&[("p", Tensor::vector(vec![1.0, 2.0]))]);
        let mut g = Graph::new();
        let x = g.param(&s, ids[0]);
        assert!(matches!(g.backward(x, &mut s), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -100.0, 0.0, 100.0]));
        let y = g.softmax_rows(x);
        for r in 0..2 {
            let s: f64 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn exp_clamp_flags() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![800.0]));
        let y = g.exp_clamped(x);
        assert!(g.exp_clamp_hit());
        assert_eq!(g.value(y).item(), EXP_CLAMP.exp());
    }

    #[test]
    fn broadcast_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let row = g.input(Tensor::matrix(1, 2, vec![10.0, 20.0]));
        let col = g.input(Tensor::matrix(2, 1, vec![100.0, 200.0]));
        let r = g.add(a, row).unwrap();
        let c = g.mul(a, col).unwrap();
        assert_eq!(g.value(r).data(), &[11.0, 22.0, 13.0, 24.0]);
        assert_eq!(g.value(c).data(), &[100.0, 200.0, 600.0, 800.0]);
        let bad = g.input(Tensor::matrix(3, 3, vec![0.0; 9]));
        assert!(g.add(a, bad).is_err());
    }
}
