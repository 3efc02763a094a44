//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only list of nodes. Every op validates its inputs,
//! computes its value eagerly and records what its backward rule needs.
//! Because nodes can only refer to earlier nodes, insertion order is a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! A graph is single-owner mutable state. Independent graphs (one per data
//! parallel worker) share nothing and can run on separate threads.

mod conv;
pub mod gradcheck;

pub use conv::{bilinear_kernel, conv_out_extent, conv_transpose_out_extent, BilinearSpec};
pub use gradcheck::finite_diff_check;

use crate::error::{invalid, shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm behaviour: normalise with batch statistics, or with running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Splits a shape into `(outer, channels, inner)` around axis 1.
///
/// `(N, C)` gives `(N, C, 1)`; `(N, C, H, W)` gives `(N, C, H*W)`.
pub fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return shape_err(format!("need a channel axis, got shape {shape:?}"));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, stride: usize, pad: usize },
    ConvTranspose2d { input: Var, kernel: Var, stride: usize, pad: usize },
    BiasAdd { input: Var, bias: Var },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, mean: Vec<T>, var: Vec<T>, train: bool },
    Relu { input: Var },
    Add { a: Var, b: Var },
    Scale { input: Var, factor: T },
    Concat { a: Var, b: Var },
    SliceChannels { input: Var, start: usize },
    Softmax { input: Var },
    Hierarchy { input: Var },
    Sum { input: Var },
    Mean { input: Var },
    /// Scalar-valued node whose derivative w.r.t. `input` was computed eagerly.
    Fused { input: Var, local_grad: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation graph; see the module docs.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs_grad)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that does not.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Batch statistics `(mean, biased variance)` recorded by a train-mode batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, train: true, .. } => Some((mean, var)),
            _ => None,
        }
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = conv::conv2d_forward(self.value(input), self.value(kernel), stride, pad)?;
        Ok(self.derived(y, Op::Conv2d { input, kernel, stride, pad }, &[input, kernel]))
    }

    /// Transposed convolution; output extent `(H-1)*stride + K - 2*pad`.
    pub fn conv_transpose2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = conv::conv_transpose2d_forward(self.value(input), self.value(kernel), stride, pad)?;
        Ok(self.derived(y, Op::ConvTranspose2d { input, kernel, stride, pad }, &[input, kernel]))
    }

    /// Adds a per-channel bias of shape `(C)`.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (outer, c, inner) = channel_layout(self.shape(input))?;
        if self.value(bias).numel() != c {
            return shape_err(format!("bias of {} for {c} channels", self.value(bias).numel()));
        }
        let b = self.value(bias).data();
        let mut y = self.value(input).clone();
        for (i, chunk) in y.data_mut().chunks_mut(inner).enumerate() {
            let bc = b[i % c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        debug_assert_eq!(y.numel(), outer * c * inner);
        Ok(self.derived(y, Op::BiasAdd { input, bias }, &[input, bias]))
    }

    /// Max pooling; the first maximum in row-major window order wins ties.
    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).nchw()?;
        if window == 0 || stride == 0 {
            return invalid("maxpool window and stride must be >= 1");
        }
        if window > h || window > w {
            return shape_err(format!("maxpool window {window} larger than {h}x{w} input"));
        }
        let ho = (h - window) / stride + 1;
        let wo = (w - window) / stride + 1;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let y = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.derived(y, Op::MaxPool2d { input, argmax }, &[input]))
    }

    /// Per-channel batch normalisation over batch and spatial positions.
    ///
    /// In [`Mode::Train`] the batch statistics are used (and can be read back
    /// with [`Graph::batch_stats`]); in [`Mode::Eval`] `running` supplies
    /// `(mean, variance)`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        mode: Mode,
        running: Option<(&[T], &[T])>,
    ) -> Result<Var> {
        let (outer, c, inner) = channel_layout(self.shape(input))?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return shape_err(format!("batch norm affine parameters must have {c} entries"));
        }
        if !(eps > T::ZERO) {
            return invalid("batch norm epsilon must be positive");
        }
        let x = self.value(input).data();
        let count = T::from_f64((outer * inner) as f64);
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![T::ZERO; c];
                let mut var = vec![T::ZERO; c];
                for (ch, (m, v)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
                    let plane = |o: usize| &x[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                    let s: T = (0..outer).map(|o| plane(o).iter().copied().sum::<T>()).sum();
                    *m = s / count;
                    let ss: T = (0..outer)
                        .map(|o| plane(o).iter().map(|&xi| (xi - *m) * (xi - *m)).sum::<T>())
                        .sum();
                    *v = ss / count;
                }
                (mean, var)
            }
            Mode::Eval => {
                let (rm, rv) = running.ok_or_else(|| crate::Error::Invalid("eval batch norm needs running stats".into()))?;
                if rm.len() != c || rv.len() != c {
                    return shape_err(format!("running stats must have {c} entries"));
                }
                (rm.to_vec(), rv.to_vec())
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::ZERO; x.len()];
        let mut y = vec![T::ZERO; x.len()];
        for (i, (xc, yc)) in x.chunks(inner).zip(y.chunks_mut(inner)).enumerate() {
            let ch = i % c;
            let xh = &mut xhat[i * inner..(i + 1) * inner];
            for ((&xi, xo), yo) in xc.iter().zip(xh.iter_mut()).zip(yc.iter_mut()) {
                *xo = (xi - mean[ch]) * inv_std[ch];
                *yo = g[ch] * *xo + b[ch];
            }
        }
        let y = Tensor::new(self.shape(input), y)?;
        let op = Op::BatchNorm { input, gamma, beta, xhat, inv_std, mean, var, train: mode == Mode::Train };
        Ok(self.derived(y, op, &[input, gamma, beta]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let mut y = self.value(input).clone();
        y.data_mut().iter_mut().for_each(|v| {
            if !(*v > T::ZERO) {
                *v = T::ZERO
            }
        });
        self.derived(y, Op::Relu { input }, &[input])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("add {:?} + {:?}", self.shape(a), self.shape(b)));
        }
        let mut y = self.value(a).clone();
        for (o, &bv) in y.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += bv;
        }
        Ok(self.derived(y, Op::Add { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let mut y = self.value(input).clone();
        y.data_mut().iter_mut().for_each(|v| *v *= factor);
        self.derived(y, Op::Scale { input, factor }, &[input])
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (oa, ca, ia) = channel_layout(&sa)?;
        let (ob, cb, ib) = channel_layout(&sb)?;
        if oa != ob || ia != ib || sa[2..] != sb[2..] {
            return shape_err(format!("concat {sa:?} with {sb:?}"));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(xa.len() + xb.len());
        for o in 0..oa {
            out.extend_from_slice(&xa[o * ca * ia..(o + 1) * ca * ia]);
            out.extend_from_slice(&xb[o * cb * ib..(o + 1) * cb * ib]);
        }
        let mut shape = sa.clone();
        shape[1] = ca + cb;
        let y = Tensor::new(&shape, out)?;
        Ok(self.derived(y, Op::Concat { a, b }, &[a, b]))
    }

    /// Channels `[start, end)`.
    pub fn slice_channels(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (outer, c, inner) = channel_layout(&shape)?;
        if start >= end || end > c {
            return shape_err(format!("channel slice {start}..{end} of {c}"));
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * c + start) * inner..(o * c + end) * inner]);
        }
        let mut s = shape;
        s[1] = end - start;
        let y = Tensor::new(&s, out)?;
        Ok(self.derived(y, Op::SliceChannels { input, start }, &[input]))
    }

    /// Softmax over the channel axis, stabilised by max subtraction.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (outer, c, inner) = channel_layout(&shape)?;
        let mut y = self.value(input).clone();
        softmax_in_place(y.data_mut(), outer, c, inner);
        Ok(self.derived(y, Op::Softmax { input }, &[input]))
    }

    /// Nested-region probabilities from 5-class probabilities:
    /// `p0 = q1+q2+q3+q4`, `p1 = q1+q3+q4`, `p2 = q4` on the channel axis.
    pub fn hierarchy(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (outer, c, inner) = channel_layout(&shape)?;
        if c != crate::NUM_CLASSES {
            return shape_err(format!("hierarchy needs {} channels, got {c}", crate::NUM_CLASSES));
        }
        let q = self.value(input).data();
        let mut out = vec![T::ZERO; outer * 3 * inner];
        for o in 0..outer {
            let qc = |k: usize, s: usize| q[(o * c + k) * inner + s];
            for s in 0..inner {
                let p2 = qc(4, s);
                let p1 = qc(1, s) + qc(3, s) + p2;
                let p0 = p1 + qc(2, s);
                out[(o * 3) * inner + s] = p0;
                out[(o * 3 + 1) * inner + s] = p1;
                out[(o * 3 + 2) * inner + s] = p2;
            }
        }
        let mut s = shape;
        s[1] = 3;
        let y = Tensor::new(&s, out)?;
        Ok(self.derived(y, Op::Hierarchy { input }, &[input]))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let y = Tensor::scalar(self.value(input).sum());
        self.derived(y, Op::Sum { input }, &[input])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let y = Tensor::scalar(x.sum() / T::from_f64(x.numel() as f64));
        self.derived(y, Op::Mean { input }, &[input])
    }

    /// Records a scalar node with value `value` whose gradient w.r.t. `input`
    /// is `local_grad` (used by the fused loss implementations).
    pub fn fused_scalar(&mut self, input: Var, value: T, local_grad: Vec<T>) -> Result<Var> {
        if local_grad.len() != self.value(input).numel() {
            return shape_err("fused node gradient does not match its input");
        }
        Ok(self.derived(Tensor::scalar(value), Op::Fused { input, local_grad }, &[input]))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return shape_err(format!("backward root must be scalar, got {:?}", self.shape(root)));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::ONE]);
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(dy);
            } else {
                self.propagate(node, &dy, &mut grads)?;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { input, kernel, stride, pad } => {
                let (dx, dw) = conv::conv2d_backward(
                    self.value(input),
                    self.value(kernel),
                    dy,
                    stride,
                    pad,
                    self.wants(input),
                    self.wants(kernel),
                )?;
                accumulate_opt(grads, input, dx);
                accumulate_opt(grads, kernel, dw);
            }
            &Op::ConvTranspose2d { input, kernel, stride, pad } => {
                let (dx, dw) = conv::conv_transpose2d_backward(
                    self.value(input),
                    self.value(kernel),
                    dy,
                    stride,
                    pad,
                    self.wants(input),
                    self.wants(kernel),
                )?;
                accumulate_opt(grads, input, dx);
                accumulate_opt(grads, kernel, dw);
            }
            &Op::BiasAdd { input, bias } => {
                let (_, c, inner) = channel_layout(node.value.shape())?;
                if self.wants(bias) {
                    let mut db = vec![T::ZERO; c];
                    for (i, chunk) in dy.chunks(inner).enumerate() {
                        db[i % c] += chunk.iter().copied().sum::<T>();
                    }
                    accumulate(grads, bias, &db);
                }
                accumulate(grads, input, dy);
            }
            Op::MaxPool2d { input, argmax } => {
                let mut dx = vec![T::ZERO; self.value(*input).numel()];
                for (&idx, &g) in argmax.iter().zip(dy) {
                    dx[idx] += g;
                }
                accumulate(grads, *input, &dx);
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train, .. } => {
                let (outer, c, inner) = channel_layout(node.value.shape())?;
                let g = self.value(*gamma).data();
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                for (i, (dyc, xc)) in dy.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                    let ch = i % c;
                    for (&d, &xh) in dyc.iter().zip(xc) {
                        dgamma[ch] += d * xh;
                        dbeta[ch] += d;
                    }
                }
                if self.wants(*input) {
                    let m = T::from_f64((outer * inner) as f64);
                    let mut dx = vec![T::ZERO; dy.len()];
                    for (i, ((dxc, dyc), xc)) in dx.chunks_mut(inner).zip(dy.chunks(inner)).zip(xhat.chunks(inner)).enumerate() {
                        let ch = i % c;
                        let k = g[ch] * inv_std[ch];
                        if *train {
                            let (sd, sdx) = (dbeta[ch] / m, dgamma[ch] / m);
                            for ((o, &d), &xh) in dxc.iter_mut().zip(dyc).zip(xc) {
                                *o = k * (d - sd - xh * sdx);
                            }
                        } else {
                            for (o, &d) in dxc.iter_mut().zip(dyc) {
                                *o = k * d;
                            }
                        }
                    }
                    accumulate(grads, *input, &dx);
                }
                accumulate(grads, *gamma, &dgamma);
                accumulate(grads, *beta, &dbeta);
            }
            &Op::Relu { input } => {
                let dx: Vec<T> = dy
                    .iter()
                    .zip(node.value.data())
                    .map(|(&d, &y)| if y > T::ZERO { d } else { T::ZERO })
                    .collect();
                accumulate(grads, input, &dx);
            }
            &Op::Add { a, b } => {
                accumulate(grads, a, dy);
                accumulate(grads, b, dy);
            }
            &Op::Scale { input, factor } => {
                let dx: Vec<T> = dy.iter().map(|&d| d * factor).collect();
                accumulate(grads, input, &dx);
            }
            &Op::Concat { a, b } => {
                let (outer, ca, inner) = channel_layout(self.shape(a))?;
                let cb = self.shape(b)[1];
                let (mut da, mut db) = (Vec::with_capacity(outer * ca * inner), Vec::with_capacity(outer * cb * inner));
                for o in 0..outer {
                    let row = &dy[o * (ca + cb) * inner..(o + 1) * (ca + cb) * inner];
                    da.extend_from_slice(&row[..ca * inner]);
                    db.extend_from_slice(&row[ca * inner..]);
                }
                accumulate(grads, a, &da);
                accumulate(grads, b, &db);
            }
            &Op::SliceChannels { input, start } => {
                let (outer, c, inner) = channel_layout(self.shape(input))?;
                let width = node.value.shape()[1];
                let mut dx = vec![T::ZERO; outer * c * inner];
                for o in 0..outer {
                    dx[(o * c + start) * inner..(o * c + start + width) * inner]
                        .copy_from_slice(&dy[o * width * inner..(o + 1) * width * inner]);
                }
                accumulate(grads, input, &dx);
            }
            &Op::Softmax { input } => {
                let (outer, c, inner) = channel_layout(node.value.shape())?;
                let p = node.value.data();
                let mut dx = vec![T::ZERO; p.len()];
                for o in 0..outer {
                    for s in 0..inner {
                        let idx = |k: usize| (o * c + k) * inner + s;
                        let dot: T = (0..c).map(|k| dy[idx(k)] * p[idx(k)]).sum();
                        for k in 0..c {
                            dx[idx(k)] = p[idx(k)] * (dy[idx(k)] - dot);
                        }
                    }
                }
                accumulate(grads, input, &dx);
            }
            &Op::Hierarchy { input } => {
                let (outer, c, inner) = channel_layout(self.shape(input))?;
                let mut dx = vec![T::ZERO; outer * c * inner];
                for o in 0..outer {
                    for s in 0..inner {
                        let g0 = dy[(o * 3) * inner + s];
                        let g1 = dy[(o * 3 + 1) * inner + s];
                        let g2 = dy[(o * 3 + 2) * inner + s];
                        let at = |k: usize| (o * c + k) * inner + s;
                        dx[at(1)] = g0 + g1;
                        dx[at(2)] = g0;
                        dx[at(3)] = g0 + g1;
                        dx[at(4)] = g0 + g1 + g2;
                    }
                }
                accumulate(grads, input, &dx);
            }
            &Op::Sum { input } => {
                let dx = vec![dy[0]; self.value(input).numel()];
                accumulate(grads, input, &dx);
            }
            &Op::Mean { input } => {
                let n = self.value(input).numel();
                let dx = vec![dy[0] / T::from_f64(n as f64); n];
                accumulate(grads, input, &dx);
            }
            Op::Fused { input, local_grad } => {
                let dx: Vec<T> = local_grad.iter().map(|&g| g * dy[0]).collect();
                accumulate(grads, *input, &dx);
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place<T: Real>(x: &mut [T], outer: usize, c: usize, inner: usize) {
    for o in 0..outer {
        for s in 0..inner {
            let idx = |k: usize| (o * c + k) * inner + s;
            let mut m = x[idx(0)];
            for k in 1..c {
                m = m.max(x[idx(k)]);
            }
            let mut z = T::ZERO;
            for k in 0..c {
                let e = (x[idx(k)] - m).exp();
                x[idx(k)] = e;
                z += e;
            }
            for k in 0..c {
                x[idx(k)] /= z;
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_opt<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Option<Vec<T>>) {
    if let Some(g) = g {
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Result of [`Graph::backward`]: d(root)/d(leaf) for every parameter leaf
/// reachable from the root.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
