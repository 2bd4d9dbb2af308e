//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every executed operation in execution order. Node ids
//! ([`Var`]) are indices into that record, so inputs always precede the nodes
//! that consume them and the reverse sweep is a plain reverse iteration.

pub mod kernels;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use kernels::Window;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;
pub const LOG_CLAMP: f64 = 1e-12;

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::of(BN_MOMENTUM),
            epsilon: T::of(BN_EPSILON),
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        win: Window,
    },
    Add(Var, Var),
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Relu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Pool {
        x: Var,
        kind: PoolKind,
        win: Window,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Dense {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Softmax(Var),
    SparseCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf. Its `requires_grad` flag decides whether
    /// [`Graph::backward`] fills its gradient.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad(false))
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].value.requires_grad)
    }

    fn record(&mut self, what: &str, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let requires_grad = self.needs_grad(inputs);
        let out = Tensor::new(shape, data)?.with_grad(requires_grad);
        out.ensure_finite(what)?;
        Ok(self.push(out, op))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (n, cin, h, w) = self.value(input).dims4("conv2d input")?;
        let (cout, kcin, kh, kw) = self.value(kernel).dims4("conv2d kernel")?;
        if kcin != cin {
            return Err(Error::dim(format!(
                "conv2d kernel expects {kcin} input channels, input has {cin}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::dim(format!(
                    "conv2d bias shape {:?} does not match {cout} output channels",
                    self.shape(b)
                )));
            }
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        let win = Window {
            in_h: h,
            in_w: w,
            k_h: kh,
            k_w: kw,
            stride,
            padding,
        };
        let (oh, ow) = win.output().ok_or_else(|| {
            Error::dim(format!(
                "conv2d kernel {kh}×{kw} does not fit input {h}×{w} with padding {padding}"
            ))
        })?;
        let plane = oh * ow;
        let rows = cin * kh * kw;
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let mut out = vec![T::zero(); n * cout * plane];
        let mut col = vec![T::zero(); rows * plane];
        for b in 0..n {
            kernels::im2col(&x[b * cin * h * w..(b + 1) * cin * h * w], cin, &win, &mut col);
            let dst = &mut out[b * cout * plane..(b + 1) * cout * plane];
            if let Some(bv) = bias {
                let bd = self.value(bv).data();
                for (c, chunk) in dst.chunks_mut(plane).enumerate() {
                    chunk.fill(bd[c]);
                }
            }
            kernels::gemm_nn(cout, rows, plane, k, &col, dst);
        }
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.record(
            "conv2d",
            vec![n, cout, oh, ow],
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                win,
            },
            &inputs,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "add requires identical shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.record("add", shape, data, Op::Add(a, b), &[a, b])
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_channels needs at least one part"))?;
        let (n, _, h, w) = self.value(first).dims4("concat_channels part")?;
        let mut total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4("concat_channels part")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::dim(format!(
                    "concat_channels parts disagree: {:?} vs {:?}",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            total += pc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        self.record(
            "concat_channels",
            vec![n, total, h, w],
            out,
            Op::Concat(parts.to_vec()),
            parts,
        )
    }

    /// Channels `start..start+len` of an N×C×H×W tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("slice_channels")?;
        if len == 0 || start + len > c {
            return Err(Error::dim(format!(
                "slice_channels {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            out.extend_from_slice(&src[base..base + len * plane]);
        }
        self.record(
            "slice_channels",
            vec![n, len, h, w],
            out,
            Op::SliceChannels { x, start },
            &[x],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        self.record("relu", shape, data, Op::Relu(x), &[x])
    }

    /// Per-channel batch normalization.
    ///
    /// `Mode::Train` normalizes with batch statistics and folds them into
    /// `state` with its momentum; `Mode::Infer` uses the running statistics
    /// and leaves `state` untouched.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, state: &mut BatchNormState<T>, mode: Mode) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("batch_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(format!(
                "batch_norm affine parameters {:?}/{:?} do not match {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if state.running_mean.len() != c || state.running_var.len() != c {
            return Err(Error::dim(format!(
                "batch_norm running statistics hold {} channels, input has {c}",
                state.running_mean.len()
            )));
        }
        if state.epsilon <= T::zero() {
            return Err(Error::config("batch_norm epsilon must be positive"));
        }
        let plane = h * w;
        let count = n * plane;
        if count == 0 {
            return Err(Error::dim("batch_norm over zero batch elements"));
        }
        let xs = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        match mode {
            Mode::Train => {
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        s += xs[base..base + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut sq = 0.0f64;
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        sq += xs[base..base + plane]
                            .iter()
                            .map(|v| {
                                let d = v.as_f64() - m;
                                d * d
                            })
                            .sum::<f64>();
                    }
                    mean[ch] = T::of(m);
                    var[ch] = T::of(sq / count as f64);
                }
            }
            Mode::Infer => {
                mean.copy_from_slice(&state.running_mean);
                var.copy_from_slice(&state.running_var);
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + state.epsilon).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        if mode == Mode::Train {
            let m = state.momentum;
            for ch in 0..c {
                state.running_mean[ch] = m * state.running_mean[ch] + (T::one() - m) * mean[ch];
                state.running_var[ch] = m * state.running_var[ch] + (T::one() - m) * var[ch];
            }
        }
        let shape = self.shape(x).to_vec();
        self.record(
            "batch_norm",
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            &[x, gamma, beta],
        )
    }

    pub fn pool2d(&mut self, x: Var, kind: PoolKind, size: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("pool2d")?;
        let win = Window {
            in_h: h,
            in_w: w,
            k_h: size,
            k_w: size,
            stride,
            padding: 0,
        };
        let (oh, ow) = win.output().ok_or_else(|| {
            Error::dim(format!(
                "pool2d window {size} (stride {stride}) does not fit input {h}×{w}"
            ))
        })?;
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = match kind {
            PoolKind::Max => vec![0usize; out.len()],
            PoolKind::Avg => Vec::new(),
        };
        let norm = T::of((size * size) as f64);
        for nc in 0..n * c {
            let base = nc * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let o = (nc * oh + oi) * ow + oj;
                    match kind {
                        PoolKind::Max => {
                            let mut best = base + oi * stride * w + oj * stride;
                            for ki in 0..size {
                                for kj in 0..size {
                                    let idx = base + (oi * stride + ki) * w + oj * stride + kj;
                                    if xs[idx] > xs[best] {
                                        best = idx;
                                    }
                                }
                            }
                            argmax[o] = best;
                            out[o] = xs[best];
                        }
                        PoolKind::Avg => {
                            let mut s = T::zero();
                            for ki in 0..size {
                                for kj in 0..size {
                                    s = s + xs[base + (oi * stride + ki) * w + oj * stride + kj];
                                }
                            }
                            out[o] = s / norm;
                        }
                    }
                }
            }
        }
        self.record(
            "pool2d",
            vec![n, c, oh, ow],
            out,
            Op::Pool {
                x,
                kind,
                win,
                argmax,
            },
            &[x],
        )
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("global_avg_pool")?;
        let plane = h * w;
        let norm = T::of(plane as f64);
        let out = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().fold(T::zero(), |a, &v| a + v) / norm)
            .collect();
        self.record("global_avg_pool", vec![n, c], out, Op::GlobalAvgPool(x), &[x])
    }

    /// Affine map `x · weight + bias` with `x: N×F`, `weight: F×K`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, f) = self.value(x).dims2("dense input")?;
        let (wf, k) = self.value(weight).dims2("dense weight")?;
        if wf != f || self.shape(bias) != [k] {
            return Err(Error::dim(format!(
                "dense input {:?}, weight {:?}, bias {:?} are inconsistent",
                self.shape(x),
                self.shape(weight),
                self.shape(bias)
            )));
        }
        let bd = self.value(bias).data();
        let mut out: Vec<T> = (0..n).flat_map(|_| bd.iter().copied()).collect();
        kernels::gemm_nn(n, f, k, self.value(x).data(), self.value(weight).data(), &mut out);
        self.record("dense", vec![n, k], out, Op::Dense { x, weight, bias }, &[x, weight, bias])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, k) = self.value(x).dims2("softmax")?;
        let out = softmax_rows(self.value(x).data(), k);
        let shape = self.shape(x).to_vec();
        self.record("softmax", shape, out, Op::Softmax(x), &[x])
    }

    /// Mean over the batch of `-ln softmax(logits)[label]`, with the
    /// probability clamped below at `1e-12`.
    pub fn sparse_categorical_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).dims2("cross-entropy logits")?;
        if labels.len() != n {
            return Err(Error::dim(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let probs = softmax_rows(self.value(logits).data(), k);
        let clamp = T::of(LOG_CLAMP);
        let total = labels
            .iter()
            .enumerate()
            .fold(T::zero(), |acc, (i, &l)| acc - probs[i * k + l].max(clamp).ln());
        let loss = total / T::of(n as f64);
        self.record(
            "cross-entropy",
            vec![1],
            vec![loss],
            Op::SparseCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.record("sum", vec![1], vec![s], Op::Sum(x), &[x])
    }

    /// `Σ x ⊙ weights` for a constant weight buffer of the same size.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(Error::dim(format!(
                "weighted_sum weights of length {} for shape {:?}",
                weights.len(),
                self.shape(x)
            )));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        self.record("weighted_sum", vec![1], vec![s], Op::WeightedSum { x, weights }, &[x])
    }

    /// Reverse sweep from a scalar `loss`, seeding its gradient with 1.
    ///
    /// Gradients are written into every node that requires one. A graph
    /// supports a single backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this graph; re-run the forward pass".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].value.requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
            self.nodes[id].value.set_grad(g)?;
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
        if !self.nodes[v.0].value.requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e = *e + c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                win,
            } => {
                let (n, cin, h, w) = self.value(*input).dims4("conv2d input")?;
                let (cout, _, kh, kw) = self.value(*kernel).dims4("conv2d kernel")?;
                let (oh, ow) = win.output().expect("validated in forward");
                let plane = oh * ow;
                let rows = cin * kh * kw;
                let x = self.value(*input).data();
                let k = self.value(*kernel).data();
                let want_x = self.value(*input).requires_grad;
                let want_k = self.value(*kernel).requires_grad;
                let mut dx = vec![T::zero(); if want_x { x.len() } else { 0 }];
                let mut dk = vec![T::zero(); if want_k { k.len() } else { 0 }];
                let mut col = vec![T::zero(); rows * plane];
                let mut dcol = vec![T::zero(); rows * plane];
                for b in 0..n {
                    let gb = &g[b * cout * plane..(b + 1) * cout * plane];
                    if want_k {
                        kernels::im2col(&x[b * cin * h * w..(b + 1) * cin * h * w], cin, win, &mut col);
                        kernels::gemm_nt(cout, plane, rows, gb, &col, &mut dk);
                    }
                    if want_x {
                        dcol.fill(T::zero());
                        kernels::gemm_tn(rows, cout, plane, k, gb, &mut dcol);
                        kernels::col2im(&dcol, cin, win, &mut dx[b * cin * h * w..(b + 1) * cin * h * w]);
                    }
                }
                if want_x {
                    self.accumulate(grads, *input, dx);
                }
                if want_k {
                    self.accumulate(grads, *kernel, dk);
                }
                if let Some(bv) = bias {
                    let mut db = vec![T::zero(); cout];
                    for (i, chunk) in g.chunks(plane).enumerate() {
                        db[i % cout] = db[i % cout] + chunk.iter().fold(T::zero(), |a, &v| a + v);
                    }
                    self.accumulate(grads, *bv, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Concat(parts) => {
                let (n, total, h, w) = node.value.dims4("concat_channels")?;
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    let mut dp = Vec::with_capacity(n * c * plane);
                    for b in 0..n {
                        let base = (b * total + offset) * plane;
                        dp.extend_from_slice(&g[base..base + c * plane]);
                    }
                    self.accumulate(grads, p, dp);
                    offset += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let (n, c, h, w) = self.value(*x).dims4("slice_channels")?;
                let len = node.value.shape()[1];
                let plane = h * w;
                let mut dx = vec![T::zero(); n * c * plane];
                for b in 0..n {
                    let dst = (b * c + start) * plane;
                    let src = b * len * plane;
                    dx[dst..dst + len * plane].copy_from_slice(&g[src..src + len * plane]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = self.value(*x).dims4("batch_norm")?;
                let plane = h * w;
                let count = T::of((n * plane) as f64);
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for i in base..base + plane {
                            dbeta[ch] = dbeta[ch] + g[i];
                            dgamma[ch] = dgamma[ch] + g[i] * xhat[i];
                        }
                    }
                }
                if self.value(*x).requires_grad {
                    let mut dx = vec![T::zero(); g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            let scale = gm[ch] * inv_std[ch];
                            for i in base..base + plane {
                                dx[i] = if *batch_stats {
                                    scale * (g[i] - dbeta[ch] / count - xhat[i] * dgamma[ch] / count)
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Pool {
                x,
                kind,
                win,
                argmax,
            } => {
                let (n, c, h, w) = self.value(*x).dims4("pool2d")?;
                let (oh, ow) = win.output().expect("validated in forward");
                let mut dx = vec![T::zero(); n * c * h * w];
                match kind {
                    PoolKind::Max => {
                        for (o, &src) in argmax.iter().enumerate() {
                            dx[src] = dx[src] + g[o];
                        }
                    }
                    PoolKind::Avg => {
                        let norm = T::of((win.k_h * win.k_w) as f64);
                        for nc in 0..n * c {
                            let base = nc * h * w;
                            for oi in 0..oh {
                                for oj in 0..ow {
                                    let share = g[(nc * oh + oi) * ow + oj] / norm;
                                    for ki in 0..win.k_h {
                                        for kj in 0..win.k_w {
                                            let idx = base + (oi * win.stride + ki) * w + oj * win.stride + kj;
                                            dx[idx] = dx[idx] + share;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4("global_avg_pool")?;
                let plane = h * w;
                let norm = T::of(plane as f64);
                let dx = g.iter().flat_map(|&gv| std::iter::repeat_n(gv / norm, plane)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Dense { x, weight, bias } => {
                let (n, f) = self.value(*x).dims2("dense input")?;
                let k = self.shape(*weight)[1];
                if self.value(*x).requires_grad {
                    let mut dx = vec![T::zero(); n * f];
                    kernels::gemm_nt(n, k, f, g, self.value(*weight).data(), &mut dx);
                    self.accumulate(grads, *x, dx);
                }
                if self.value(*weight).requires_grad {
                    let mut dw = vec![T::zero(); f * k];
                    kernels::gemm_tn(f, n, k, self.value(*x).data(), g, &mut dw);
                    self.accumulate(grads, *weight, dw);
                }
                let mut db = vec![T::zero(); k];
                for row in g.chunks(k) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                self.accumulate(grads, *bias, db);
            }
            Op::Softmax(x) => {
                let k = node.value.shape()[1];
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(k).zip(g.chunks(k)).zip(dx.chunks_mut(k)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&yv, &gv)| a + yv * gv);
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SparseCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / T::of(labels.len() as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * k + l] = dx[i * k + l] - scale;
                }
                self.accumulate(grads, *logits, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::WeightedSum { x, weights } => {
                self.accumulate(grads, *x, weights.iter().map(|&wv| wv * g[0]).collect());
            }
        }
        Ok(())
    }
}

/// Row-wise numerically stable softmax over a flat `rows×k` buffer.
pub fn softmax_rows<T: Scalar>(x: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(k) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total = exps.iter().fold(T::zero(), |a, &v| a + v);
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}

#[cfg(test)]
mod tests;
