//! Tape-based reverse-mode differentiation.
//!
//! Every op appends one node holding its output value and whatever it needs
//! for the backward pass. Node indices are a topological order, so
//! [`Tape::backward`] is a single reverse sweep.

use std::fmt;

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom, ConvGrads, ConvSpec};
use crate::sigmoid;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Hook for ops defined outside this crate (losses, decoders).
///
/// `backward` receives the input values, the output value and the adjoint of
/// the output, and returns one optional adjoint per input.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

/// Running statistics owned by a BatchNorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        invstd: Vec<f64>,
        train: bool,
    },
    Silu(Var),
    Sigmoid(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvg(Var),
    GlobalMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `x + b` where `b` repeats over the batch axis (and, for per-channel
    /// `b`, over the spatial axes too).
    AddBroadcast {
        x: Var,
        b: Var,
        per_channel: bool,
    },
    MulChannel {
        x: Var,
        gate: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Silu(x) | Op::Sigmoid(x) | Op::GlobalAvg(x) | Op::Sum(x) | Op::Mean(x) | Op::Scale(x, _) => {
                vec![*x]
            }
            Op::MaxPool { x, .. } | Op::GlobalMax { x, .. } | Op::Upsample { x, .. } | Op::Slice { x, .. } => {
                vec![*x]
            }
            Op::Concat(xs) => xs.clone(),
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddBroadcast { x, b, .. } => vec![*x, *b],
            Op::MulChannel { x, gate } => vec![*x, *gate],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for one forward pass.
///
/// Leaf gradients persist across [`Tape::backward`] calls and accumulate
/// additively until [`Tape::zero_grads`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => value.requires_grad(),
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adds a leaf. Its gradient is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.zero_grad();
        self.push(t, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        let v = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec()).with_requires_grad();
        self.push(v, Op::Leaf)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), spec)?;
        if let Some(b) = b {
            if self.value(b).numel() != geom.c_out {
                return Err(TensorError::shape(
                    "conv2d",
                    format!("bias has {} elements, expected {}", self.value(b).numel(), geom.c_out),
                ));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let t = Tensor::from_parts(geom.out_shape().to_vec(), out);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }))
    }

    /// Per-channel normalization over N, H, W.
    ///
    /// Train mode normalizes with batch statistics and folds them into
    /// `stats` (momentum [`BN_MOMENTUM`], unbiased variance); eval mode uses
    /// `stats` unchanged.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: &mut BnStats, mode: Mode) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(TensorError::shape(
                "batch_norm",
                format!(
                    "gamma/beta lengths {}/{} do not match {c} channels",
                    self.value(gamma).numel(),
                    self.value(beta).numel()
                ),
            ));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(TensorError::shape("batch_norm", "running statistics length mismatch"));
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let xs = self.value(x).data();
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += xs[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let mu = s / m;
                    let mut sq = 0.0;
                    for b in 0..n {
                        sq += xs[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = sq / m;
                }
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                for ch in 0..c {
                    stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mean[ch];
                    stats.var[ch] = (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * var[ch] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (xs[i] - mean[ch]) * invstd[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let t = Tensor::from_parts(vec![n, c, h, w], out);
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                train: mode == Mode::Train,
            },
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = v.data().iter().map(|&z| z * sigmoid(z)).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(t, Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = v.data().iter().map(|&z| sigmoid(z)).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (out, shape, argmax) = kernels::max_pool2d(self.value(x).data(), [n, c, h, w], k, stride, pad)?;
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::MaxPool { x, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xs = self.value(x).data();
        let out = (0..n * c)
            .map(|p| xs[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(self.push(Tensor::from_parts(vec![n, c, 1, 1], out), Op::GlobalAvg(x)))
    }

    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for p in 0..n * c {
            let (mut bi, mut bv) = (p * hw, f64::NEG_INFINITY);
            for i in p * hw..(p + 1) * hw {
                if xs[i] > bv {
                    bv = xs[i];
                    bi = i;
                }
            }
            out.push(bv);
            argmax.push(bi);
        }
        Ok(self.push(Tensor::from_parts(vec![n, c, 1, 1], out), Op::GlobalMax { x, argmax }))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if factor == 0 {
            return Err(TensorError::invalid("upsample_nearest", "factor must be >= 1"));
        }
        let out = kernels::upsample_nearest(self.value(x).data(), [n, c, h, w], factor);
        let t = Tensor::from_parts(vec![n, c, h * factor, w * factor], out);
        Ok(self.push(t, Op::Upsample { x, factor }))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(TensorError::invalid("concat_channels", "no inputs"));
        }
        let (n, _, h, w) = self.value(xs[0]).dims4()?;
        let mut parts = Vec::with_capacity(xs.len());
        for &v in xs {
            let (n2, c2, h2, w2) = self.value(v).dims4()?;
            if (n2, h2, w2) != (n, h, w) {
                return Err(TensorError::shape(
                    "concat_channels",
                    format!("extents {:?} vs {:?} differ outside the channel axis", self.shape(xs[0]), self.shape(v)),
                ));
            }
            parts.push((self.value(v).data(), c2));
        }
        let c_total = parts.iter().map(|p| p.1).sum();
        let out = kernels::concat_channels(&parts, n, h * w);
        Ok(self.push(Tensor::from_parts(vec![n, c_total, h, w], out), Op::Concat(xs.to_vec())))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if len == 0 || start + len > c {
            return Err(TensorError::shape(
                "slice_channels",
                format!("range {start}..{} outside {c} channels", start + len),
            ));
        }
        let out = kernels::slice_channels(self.value(x).data(), n, c, h * w, start, len);
        Ok(self.push(Tensor::from_parts(vec![n, len, h, w], out), Op::Slice { x, start }))
    }

    /// Splits channels into `[0, at)` and `[at, C)`.
    pub fn split_channels(&mut self, x: Var, at: usize) -> Result<(Var, Var)> {
        let (_, c, _, _) = self.value(x).dims4()?;
        if at == 0 || at >= c {
            return Err(TensorError::shape("split_channels", format!("split point {at} not inside 0..{c}")));
        }
        let a = self.slice_channels(x, 0, at)?;
        let b = self.slice_channels(x, at, c - at)?;
        Ok((a, b))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), out);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), out);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|z| z * c).collect());
        self.push(t, Op::Scale(x, c))
    }

    /// `x + b` with `b` shaped like one batch item (`[C, H, W]` or
    /// `[1, C, H, W]`) or holding one value per channel (`[C]`).
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let bn = self.value(b).numel();
        let per_channel = if bn == c * h * w {
            false
        } else if bn == c {
            true
        } else {
            return Err(TensorError::shape(
                "add_broadcast",
                format!("operand with {bn} elements cannot broadcast onto {:?}", self.shape(x)),
            ));
        };
        let hw = h * w;
        let xs = self.value(x).data();
        let bs = self.value(b).data();
        let mut out = xs.to_vec();
        for bi in 0..n {
            for ch in 0..c {
                for s in 0..hw {
                    let i = (bi * c + ch) * hw + s;
                    out[i] += if per_channel { bs[ch] } else { bs[ch * hw + s] };
                }
            }
        }
        let t = Tensor::from_parts(vec![n, c, h, w], out);
        Ok(self.push(t, Op::AddBroadcast { x, b, per_channel }))
    }

    /// Scales every channel plane of `x` by the matching `N×C×1×1` gate.
    pub fn mul_channel(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(gate) != [n, c, 1, 1] {
            return Err(TensorError::shape(
                "mul_channel",
                format!("gate {:?} does not match {:?}", self.shape(gate), [n, c, 1, 1]),
            ));
        }
        let hw = h * w;
        let gs = self.value(gate).data();
        let out = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * gs[i / hw])
            .collect();
        let t = Tensor::from_parts(vec![n, c, h, w], out);
        Ok(self.push(t, Op::MulChannel { x, gate }))
    }

    /// Single-head scaled dot-product self-attention over spatial positions.
    ///
    /// `q`, `k`, `v` are `N×d×H×W`; position `l` attends to all positions
    /// with weights `softmax_l'(q_l·k_l' / √d)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (n, d, h, w) = self.value(q).dims4()?;
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let l = h * w;
        let probs = attention_weights(self.value(q).data(), self.value(k).data(), n, d, l);
        let vs = self.value(v).data();
        let mut out = vec![0.0; n * d * l];
        for b in 0..n {
            // out[c][i] = sum_j P[i][j] v[c][j]  =>  Out(d×L) = V(d×L) · Pᵀ
            let p = &probs[b * l * l..(b + 1) * l * l];
            let vb = &vs[b * d * l..(b + 1) * d * l];
            gemm_rm(d, l, l, vb, l, 1, p, 1, l, 0.0, &mut out[b * d * l..(b + 1) * d * l]);
        }
        let t = Tensor::from_parts(vec![n, d, h, w], out);
        Ok(self.push(t, Op::Attention { q, k, v, probs }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Records an externally defined op whose output is already computed.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Reverse sweep from a scalar output, accumulating into leaf gradients.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        let shape = self.shape(out).to_vec();
        if self.value(out).numel() != 1 {
            return Err(TensorError::NonScalar(shape));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=out.0).map(|_| None).collect();
        adj[out.0] = Some(vec![1.0]);
        for idx in (0..=out.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                add_into(&mut self.leaf_grads[idx], &g);
                continue;
            }
            for (v, gv) in self.node_backward(idx, &g) {
                if self.needs(v) {
                    add_into(&mut adj[v.0], &gv);
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let zeros = |v: Var| vec![0.0; self.nodes[v.0].value.numel()];
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, geom } => {
                let mut dx = self.needs(*x).then(|| zeros(*x));
                let mut dw = self.needs(*w).then(|| zeros(*w));
                let mut db = b.filter(|b| self.needs(*b)).map(zeros);
                kernels::conv2d_backward(
                    val(*x),
                    val(*w),
                    g,
                    geom,
                    ConvGrads {
                        dx: dx.as_deref_mut(),
                        dw: dw.as_deref_mut(),
                        db: db.as_deref_mut(),
                    },
                );
                let mut res = vec![];
                res.extend(dx.map(|d| (*x, d)));
                res.extend(dw.map(|d| (*w, d)));
                if let (Some(b), Some(d)) = (b, db) {
                    res.push((*b, d));
                }
                res
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                train,
            } => {
                let [n, c, h, w] = [node.value.shape()[0], node.value.shape()[1], node.value.shape()[2], node.value.shape()[3]];
                let hw = h * w;
                let m = (n * hw) as f64;
                let gam = val(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                let mut res = vec![];
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for i in off..off + hw {
                                dx[i] = if *train {
                                    gam[ch] * invstd[ch] / m * (m * g[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    g[i] * gam[ch] * invstd[ch]
                                };
                            }
                        }
                    }
                    res.push((*x, dx));
                }
                res.push((*gamma, dgamma));
                res.push((*beta, dbeta));
                res
            }
            Op::Silu(x) => {
                let d = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&z, gi)| {
                        let s = sigmoid(z);
                        gi * s * (1.0 + z * (1.0 - s))
                    })
                    .collect();
                vec![(*x, d)]
            }
            Op::Sigmoid(x) => {
                let d = node.value.data().iter().zip(g).map(|(s, gi)| gi * s * (1.0 - s)).collect();
                vec![(*x, d)]
            }
            Op::MaxPool { x, argmax } | Op::GlobalMax { x, argmax } => {
                let mut d = zeros(*x);
                for (o, &i) in argmax.iter().enumerate() {
                    d[i] += g[o];
                }
                vec![(*x, d)]
            }
            Op::GlobalAvg(x) => {
                let xs = self.nodes[x.0].value.shape();
                let hw = xs[2] * xs[3];
                let d = (0..xs.iter().product::<usize>()).map(|i| g[i / hw] / hw as f64).collect();
                vec![(*x, d)]
            }
            Op::Upsample { x, factor } => {
                let s = self.nodes[x.0].value.shape();
                let mut d = zeros(*x);
                kernels::upsample_nearest_backward(g, [s[0], s[1], s[2], s[3]], *factor, &mut d);
                vec![(*x, d)]
            }
            Op::Concat(xs) => {
                let s = node.value.shape();
                let (n, c_total, hw) = (s[0], s[1], s[2] * s[3]);
                let mut off = 0;
                let mut res = vec![];
                for &v in xs {
                    let c = self.nodes[v.0].value.shape()[1];
                    if self.needs(v) {
                        res.push((v, kernels::slice_channels(g, n, c_total, hw, off, c)));
                    }
                    off += c;
                }
                res
            }
            Op::Slice { x, start } => {
                let s = self.nodes[x.0].value.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let len = node.value.shape()[1];
                let mut d = zeros(*x);
                for b in 0..n {
                    d[(b * c + start) * hw..(b * c + start + len) * hw]
                        .copy_from_slice(&g[b * len * hw..(b + 1) * len * hw]);
                }
                vec![(*x, d)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let da = g.iter().zip(val(*b)).map(|(gi, y)| gi * y).collect();
                let db = g.iter().zip(val(*a)).map(|(gi, y)| gi * y).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|gi| gi * c).collect())],
            Op::AddBroadcast { x, b, per_channel } => {
                let s = node.value.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut db = zeros(*b);
                for bi in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            let gi = g[(bi * c + ch) * hw + p];
                            if *per_channel {
                                db[ch] += gi;
                            } else {
                                db[ch * hw + p] += gi;
                            }
                        }
                    }
                }
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::MulChannel { x, gate } => {
                let s = node.value.shape();
                let hw = s[2] * s[3];
                let xs = val(*x);
                let gs = val(*gate);
                let dx = g.iter().enumerate().map(|(i, gi)| gi * gs[i / hw]).collect();
                let mut dg = zeros(*gate);
                for (i, gi) in g.iter().enumerate() {
                    dg[i / hw] += gi * xs[i];
                }
                vec![(*x, dx), (*gate, dg)]
            }
            Op::Attention { q, k, v, probs } => {
                let s = node.value.shape();
                let (n, d, l) = (s[0], s[1], s[2] * s[3]);
                let scale = 1.0 / (d as f64).sqrt();
                let (qs, ks, vs) = (val(*q), val(*k), val(*v));
                let mut dq = vec![0.0; n * d * l];
                let mut dk = vec![0.0; n * d * l];
                let mut dv = vec![0.0; n * d * l];
                let mut dp = vec![0.0; l * l];
                for b in 0..n {
                    let r = b * d * l..(b + 1) * d * l;
                    let p = &probs[b * l * l..(b + 1) * l * l];
                    let gb = &g[r.clone()];
                    // dV(d×L) = dOut(d×L) · P(L×L)
                    gemm_rm(d, l, l, gb, l, 1, p, l, 1, 0.0, &mut dv[r.clone()]);
                    // dP(L×L)[i][j] = sum_c dOut[c][i] V[c][j]
                    gemm_rm(l, d, l, gb, 1, l, &vs[r.clone()], l, 1, 0.0, &mut dp);
                    for i in 0..l {
                        let row = &mut dp[i * l..(i + 1) * l];
                        let prow = &p[i * l..(i + 1) * l];
                        let dot: f64 = row.iter().zip(prow).map(|(a, b)| a * b).sum();
                        row.iter_mut().zip(prow).for_each(|(a, pv)| *a = pv * (*a - dot) * scale);
                    }
                    // dQ(d×L)[c][i] = sum_j dS[i][j] K[c][j]  =>  K(d×L) · dSᵀ
                    gemm_rm(d, l, l, &ks[r.clone()], l, 1, &dp, 1, l, 0.0, &mut dq[r.clone()]);
                    // dK(d×L)[c][j] = sum_i dS[i][j] Q[c][i]  =>  Q(d×L) · dS
                    gemm_rm(d, l, l, &qs[r.clone()], l, 1, &dp, l, 1, 0.0, &mut dk[r.clone()]);
                }
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.nodes[x.0].value.numel()])],
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let grads = op.backward(&ins, &node.value, g);
                assert_eq!(grads.len(), inputs.len(), "custom op {} returned wrong gradient count", op.name());
                inputs
                    .iter()
                    .zip(grads)
                    .filter_map(|(v, gv)| gv.map(|gv| (*v, gv)))
                    .collect()
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_rm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    // SAFETY: callers pass buffers sized for the given extents and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-stochastic attention matrices, one `L×L` block per batch item, for
/// `q`/`k` laid out as `N×d×L`.
pub fn attention_weights(q: &[f64], k: &[f64], n: usize, d: usize, l: usize) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut probs = vec![0.0; n * l * l];
    for b in 0..n {
        let r = b * d * l..(b + 1) * d * l;
        let p = &mut probs[b * l * l..(b + 1) * l * l];
        // S[i][j] = sum_c q[c][i] k[c][j]
        gemm_rm(l, d, l, &q[r.clone()], 1, l, &k[r.clone()], l, 1, 0.0, p);
        for i in 0..l {
            let row = &mut p[i * l..(i + 1) * l];
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v * scale));
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v * scale - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
    }
    probs
}
