//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] owns every value produced during a forward pass. Nodes are
//! appended in evaluation order, so a node's inputs always precede it and a
//! single reverse sweep visits each node once. Leaves created with
//! [`Tape::leaf`] accumulate gradients across repeated [`Tape::backward`]
//! calls until [`Tape::zero_grad`].

use rand::Rng;

use crate::error::{contract, numeric, Error, Result};
use crate::tensor::{matmul_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { input: Var, rstd: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    PoolWeights(Var),
    WeightedSum(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable input; gradients flow into it.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        value.ensure_finite("leaf")?;
        Ok(self.push(value, Op::Leaf, true))
    }

    /// A fixed input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        value.ensure_finite("constant")?;
        Ok(self.push(value, Op::Constant, false))
    }

    /// Gaussian sampling node. The draw is a constant: gradients never flow
    /// into the noise itself.
    pub fn randn<R: Rng + ?Sized>(&mut self, shape: &[usize], rng: &mut R) -> Var {
        self.push(Tensor::randn(shape, rng), Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(numeric(format!("{} produced non-finite values", op_name(&op))));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.record(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), |x, y| x + y)?;
        self.record(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), |x, y| x - y)?;
        self.record(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), |x, y| x * y)?;
        self.record(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        self.record(out, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.record(out, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.record(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.record(out, Op::Sigmoid(a), &[a])
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(softplus);
        self.record(out, Op::Softplus(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = softmax_last(self.value(a));
        self.record(out, Op::Softmax(a), &[a])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let out = log_softmax_last(self.value(a));
        self.record(out, Op::LogSoftmax(a), &[a])
    }

    /// Normalizes each row over the last axis to zero mean and unit
    /// variance. Affine gain and bias are applied separately.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let d = x.last_dim();
        let mut out = vec![0.0; x.len()];
        let mut rstd = Vec::with_capacity(x.outer_len());
        for (row, o) in x.rows().zip(out.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (oi, &xi) in o.iter_mut().zip(row) {
                *oi = (xi - mean) * r;
            }
            rstd.push(r);
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        self.record(out, Op::LayerNorm { input: a, rstd }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.record(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(contract("mean of empty tensor"));
        }
        let out = Tensor::scalar(x.sum() / x.len() as f64);
        self.record(out, Op::Mean(a), &[a])
    }

    /// Softmax of an `[n, 1]` score column into `[1, n]` weights. The
    /// normalizer is summed in sorted order, so permuting the rows permutes
    /// the weights bit for bit.
    pub fn pool_weights(&mut self, scores: Var) -> Result<Var> {
        let x = self.value(scores);
        if x.rank() != 2 || x.shape()[1] != 1 || x.shape()[0] == 0 {
            return Err(Error::Dimension {
                left: x.shape().to_vec(),
                right: vec![x.outer_len().max(1), 1],
                context: "attention scores",
            });
        }
        let max = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.data().iter().map(|v| (v - max).exp()).collect();
        let z = order_free_sum(exps.clone());
        let out = Tensor::matrix(1, exps.len(), exps.iter().map(|e| e / z).collect())?;
        self.record(out, Op::PoolWeights(scores), &[scores])
    }

    /// `w [1, n] · h [n, d]` with each output column summed in sorted order,
    /// making the result invariant to a joint permutation of `w` and `h`.
    pub fn weighted_sum(&mut self, w: Var, h: Var) -> Result<Var> {
        let (wv, hv) = (self.value(w), self.value(h));
        if wv.rank() != 2 || hv.rank() != 2 || wv.shape()[0] != 1 || wv.shape()[1] != hv.shape()[0] {
            return Err(Error::Dimension {
                left: wv.shape().to_vec(),
                right: hv.shape().to_vec(),
                context: "weighted_sum",
            });
        }
        let (n, d) = (hv.shape()[0], hv.shape()[1]);
        let out: Vec<f64> = (0..d)
            .map(|j| order_free_sum((0..n).map(|i| wv.data()[i] * hv.data()[i * d + j]).collect()))
            .collect();
        let out = Tensor::matrix(1, d, out)?;
        self.record(out, Op::WeightedSum(w, h), &[w, h])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.record(out, Op::Transpose(a), &[a])
    }

    /// Propagates d(loss)/d(node) back to every leaf that requires grad.
    /// Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    let slot = &mut self.leaf_grads[id];
                    match slot {
                        Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                    }
                }
                Op::Constant => {}
                op => self.propagate(op, &node.value, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Leaf | Op::Constant => unreachable!(),
            Op::MatMul(a, b) => {
                let av = self.value(a);
                let bv = self.value(b);
                let (n, k) = (av.shape()[0], av.shape()[1]);
                let m = bv.shape()[1];
                if self.wants(a) {
                    // dA = G · Bᵀ
                    let bt = bv.transpose().expect("matrix");
                    let mut da = vec![0.0; n * k];
                    matmul_into(g, bt.data(), &mut da, n, m, k);
                    accumulate(grads, a, &da);
                }
                if self.wants(b) {
                    // dB = Aᵀ · G
                    let at = av.transpose().expect("matrix");
                    let mut db = vec![0.0; k * m];
                    matmul_into(at.data(), g, &mut db, k, n, m);
                    accumulate(grads, b, &db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, &reduce_to(g, self.value(a).len()));
                }
                if self.wants(b) {
                    accumulate(grads, b, &reduce_to(g, self.value(b).len()));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, &reduce_to(g, self.value(a).len()));
                }
                if self.wants(b) {
                    let neg: Vec<f64> = reduce_to(g, self.value(b).len()).iter().map(|v| -v).collect();
                    accumulate(grads, b, &neg);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.wants(a) {
                    let prod: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * bv[i % bv.len()])
                        .collect();
                    accumulate(grads, a, &reduce_to(&prod, av.len()));
                }
                if self.wants(b) {
                    let prod: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * av[i % av.len()])
                        .collect();
                    accumulate(grads, b, &reduce_to(&prod, bv.len()));
                }
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                accumulate(grads, a, &d);
            }
            Op::Relu(a) => {
                let x = self.value(a).data();
                let d: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                accumulate(grads, a, &d);
            }
            Op::Tanh(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(out.data())
                    .map(|(gi, yi)| gi * (1.0 - yi * yi))
                    .collect();
                accumulate(grads, a, &d);
            }
            Op::Sigmoid(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(out.data())
                    .map(|(gi, yi)| gi * yi * (1.0 - yi))
                    .collect();
                accumulate(grads, a, &d);
            }
            Op::Softplus(a) => {
                let x = self.value(a).data();
                let d: Vec<f64> = g.iter().zip(x).map(|(gi, &xi)| gi * sigmoid(xi)).collect();
                accumulate(grads, a, &d);
            }
            Op::Softmax(a) => {
                let dim = out.last_dim();
                let mut d = vec![0.0; g.len()];
                for ((y, gr), dr) in out.data().chunks(dim).zip(g.chunks(dim)).zip(d.chunks_mut(dim)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((di, yi), gi) in dr.iter_mut().zip(y).zip(gr) {
                        *di = yi * (gi - dot);
                    }
                }
                accumulate(grads, a, &d);
            }
            Op::LogSoftmax(a) => {
                let dim = out.last_dim();
                let mut d = vec![0.0; g.len()];
                for ((y, gr), dr) in out.data().chunks(dim).zip(g.chunks(dim)).zip(d.chunks_mut(dim)) {
                    let total: f64 = gr.iter().sum();
                    for ((di, yi), gi) in dr.iter_mut().zip(y).zip(gr) {
                        *di = gi - yi.exp() * total;
                    }
                }
                accumulate(grads, a, &d);
            }
            Op::LayerNorm { input, ref rstd } => {
                let dim = out.last_dim();
                let n = dim as f64;
                let mut d = vec![0.0; g.len()];
                for (((xhat, gr), dr), &r) in out
                    .data()
                    .chunks(dim)
                    .zip(g.chunks(dim))
                    .zip(d.chunks_mut(dim))
                    .zip(rstd)
                {
                    let g_mean = gr.iter().sum::<f64>() / n;
                    let gx_mean = gr.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((di, gi), xi) in dr.iter_mut().zip(gr).zip(xhat) {
                        *di = r * (gi - g_mean - xi * gx_mean);
                    }
                }
                accumulate(grads, input, &d);
            }
            Op::Sum(a) => {
                let d = vec![g[0]; self.value(a).len()];
                accumulate(grads, a, &d);
            }
            Op::Mean(a) => {
                let n = self.value(a).len();
                let d = vec![g[0] / n as f64; n];
                accumulate(grads, a, &d);
            }
            Op::Transpose(a) => {
                let (n, m) = (out.shape()[0], out.shape()[1]);
                let mut d = vec![0.0; g.len()];
                for i in 0..n {
                    for j in 0..m {
                        d[j * n + i] = g[i * m + j];
                    }
                }
                accumulate(grads, a, &d);
            }
            Op::PoolWeights(a) => {
                let y = out.data();
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                let d: Vec<f64> = y.iter().zip(g).map(|(yi, gi)| yi * (gi - dot)).collect();
                accumulate(grads, a, &d);
            }
            Op::WeightedSum(w, h) => {
                let (wv, hv) = (self.value(w).data(), self.value(h));
                let d = hv.last_dim();
                if self.wants(w) {
                    let dw: Vec<f64> = hv
                        .rows()
                        .map(|row| row.iter().zip(g).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(grads, w, &dw);
                }
                if self.wants(h) {
                    let mut dh = vec![0.0; hv.len()];
                    for (i, wi) in wv.iter().enumerate() {
                        for j in 0..d {
                            dh[i * d + j] = wi * g[j];
                        }
                    }
                    accumulate(grads, h, &dh);
                }
            }
        }
    }
}

/// Sum that depends only on the multiset of terms, not their order.
fn order_free_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Constant => "constant",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::Tanh(_) => "tanh",
        Op::Sigmoid(_) => "sigmoid",
        Op::Softplus(_) => "softplus",
        Op::Softmax(_) => "softmax",
        Op::LogSoftmax(_) => "log_softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::Transpose(_) => "transpose",
        Op::PoolWeights(_) => "pool_weights",
        Op::WeightedSum(..) => "weighted_sum",
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(d).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(d.to_vec()),
    }
}

/// Sums a broadcast gradient back down to a trailing-suffix shape of `len`
/// elements.
fn reduce_to(g: &[f64], len: usize) -> Vec<f64> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in g.chunks(len) {
        out.iter_mut().zip(chunk).for_each(|(o, c)| *o += c);
    }
    out
}

/// Elementwise op where the shorter shape must be a trailing suffix of the
/// longer one; the shorter operand repeats over the leading dimensions.
fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    let mismatch = || Error::Dimension {
        left: sa.to_vec(),
        right: sb.to_vec(),
        context: "elementwise broadcast",
    };
    if sa == sb {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(sa.to_vec(), data);
    }
    if sb.len() <= sa.len() && sa.ends_with(sb) && !b.is_empty() {
        let bd = b.data();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % bd.len()]))
            .collect();
        return Tensor::new(sa.to_vec(), data);
    }
    if sa.len() < sb.len() && sb.ends_with(sa) && !a.is_empty() {
        let ad = a.data();
        let data = b
            .data()
            .iter()
            .enumerate()
            .map(|(i, &y)| f(ad[i % ad.len()], y))
            .collect();
        return Tensor::new(sb.to_vec(), data);
    }
    Err(mismatch())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_last(x: &Tensor) -> Tensor {
    let d = x.last_dim();
    let mut out = Vec::with_capacity(x.len());
    for row in x.rows() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        out[start..start + d].iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

pub(crate) fn log_softmax_last(x: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(x.len());
    for row in x.rows() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}
