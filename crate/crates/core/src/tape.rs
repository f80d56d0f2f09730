//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Leaves are
//! created with [`Tape::param`] (gradient tracked) or [`Tape::constant`].
//! [`Tape::backward`] walks the list in reverse and accumulates gradients;
//! a value consumed by several operations receives the sum of their
//! contributions.

use alloc::vec;
use alloc::vec::Vec;

use crate::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    Relu(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    NormalizeRows(Var, Vec<T>),
    Sum(Var),
    Conv2d { input: Var, kernels: Var, bias: Var, geometry: ConvGeometry },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    ChannelAffine { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics computed by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance per channel.
    pub var: Vec<T>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`, present when `v` requires grad and
    /// the loss depends on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Per-channel layout `[B, C, S]` of a rank-2 `[B, C]` or rank-4 `[B, C, H, W]` tensor.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, c] => Ok((b, c, 1)),
        [b, c, h, w] => Ok((b, c, h * w)),
        _ => Err(shape_err!("channel op expects [B,C] or [B,C,H,W], got {shape:?}")),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x[N, D] + bias[D]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = self.value(x).dims2()?;
        if self.shape(bias) != [d] {
            return Err(shape_err!("bias {:?} does not match row width {d}", self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRowBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Row-wise softmax of a matrix, stabilised by max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        debug_assert_eq!(out.numel(), r * c);
        let rg = self.rg(x);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    /// Row-wise `log(sum(exp(x)))` of an `[R, C]` matrix, giving `[R]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let data: Vec<T> = self.value(x).data().chunks(c).map(logsumexp).collect();
        let out = Tensor::new(&[r], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSumExpRows(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `[N, A] | [N, B] -> [N, A+B]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca) = self.value(a).dims2()?;
        let (n2, cb) = self.value(b).dims2()?;
        if n != n2 {
            return Err(shape_err!("concat_cols row counts differ: {n} vs {n2}"));
        }
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(self.value(a).row(i));
            data.extend_from_slice(self.value(b).row(i));
        }
        let out = Tensor::new(&[n, ca + cb], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    /// `[M, D]` stacked over `[K, D]` gives `[M+K, D]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = self.value(a).dims2()?;
        let (k, d2) = self.value(b).dims2()?;
        if d != d2 {
            return Err(shape_err!("concat_rows widths differ: {d} vs {d2}"));
        }
        let mut data = Vec::with_capacity((m + k) * d);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let out = Tensor::new(&[m + k, d], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatRows(a, b), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start >= end || end > r {
            return Err(shape_err!("row slice {start}..{end} out of range for {r} rows"));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let out = Tensor::new(&[end - start, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows(x, start), rg))
    }

    /// Picks elements by flat index into a tensor of the given shape.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(shape_err!("gather index {bad} out of range for {} elements", src.len()));
        }
        let data = indices.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Gather(x, indices), rg))
    }

    /// Divides each row by its Euclidean norm; zero rows are an error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2()?;
        let mut out = self.value(x).clone();
        let mut norms = Vec::new();
        for row in out.data_mut().chunks_mut(c) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                return Err(Error::DegenerateSimilarity);
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::NormalizeRows(x, norms), rg))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).numel() as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Batched 2-D convolution with zero padding.
    ///
    /// `input` is `[B, Ci, H, W]`, `kernels` `[Co, Ci, k, k]`, `bias` `[Co]`.
    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (b, ci, h, w) = match *self.shape(input) {
            [b, c, h, w] => (b, c, h, w),
            ref s => return Err(shape_err!("conv2d input must be [B,C,H,W], got {s:?}")),
        };
        let (co, ci2, k) = match *self.shape(kernels) {
            [co, ci, kh, kw] if kh == kw => (co, ci, kh),
            ref s => return Err(shape_err!("conv2d kernels must be [Co,Ci,k,k], got {s:?}")),
        };
        if ci != ci2 {
            return Err(shape_err!("conv2d channel mismatch: input {ci}, kernels {ci2}"));
        }
        if self.shape(bias) != [co] {
            return Err(shape_err!("conv2d bias must be [{co}], got {:?}", self.shape(bias)));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d stride must be positive"));
        }
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(shape_err!("kernel {k} larger than padded input {h}x{w} (padding {padding})"));
        }
        let geometry = ConvGeometry { batch: b, in_channels: ci, out_channels: co, height: h, width: w, kernel: k, stride, padding };
        let data = conv2d_forward(&geometry, self.value(input).data(), self.value(kernels).data(), self.value(bias).data());
        let out = Tensor::new(&[b, co, geometry.out_height(), geometry.out_width()], data)?;
        let rg = self.rg(input) || self.rg(kernels) || self.rg(bias);
        Ok(self.push(out, Op::Conv2d { input, kernels, bias, geometry }, rg))
    }

    /// Train-mode batch normalisation over `[B, C]` or `[B, C, H, W]`.
    ///
    /// Normalises with the batch mean and biased variance of each channel,
    /// then applies the learnable per-channel scale and shift. Returns the
    /// batch statistics for the caller's running averages.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (b, c, s) = channel_layout(self.shape(input))?;
        if b < 2 {
            return Err(Error::DegenerateBatch(b));
        }
        self.check_channel_params(gamma, beta, c)?;
        let x = self.value(input).data();
        let n = T::of((b * s) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for bi in 0..b {
            for (ch, m) in mean.iter_mut().enumerate() {
                *m += x[(bi * c + ch) * s..][..s].iter().copied().sum::<T>();
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        for bi in 0..b {
            for ch in 0..c {
                let m = mean[ch];
                var[ch] += x[(bi * c + ch) * s..][..s].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
            }
        }
        for v in var.iter_mut() {
            *v /= n;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (out, xhat) = self.normalize_channels(input, gamma, beta, &mean, &inv_std, (b, c, s));
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let v = self.push(out, Op::BatchNorm { input, gamma, beta, xhat, inv_std }, rg);
        Ok((v, BatchStats { mean, var }))
    }

    /// Eval-mode batch normalisation with fixed statistics.
    pub fn batch_norm_eval(&mut self, input: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let (b, c, s) = channel_layout(self.shape(input))?;
        self.check_channel_params(gamma, beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err!("running statistics must have {c} channels"));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (out, xhat) = self.normalize_channels(input, gamma, beta, mean, &inv_std, (b, c, s));
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::ChannelAffine { input, gamma, beta, xhat, inv_std }, rg))
    }

    fn check_channel_params(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!(
                "scale/shift must be [{c}], got {:?} / {:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        Ok(())
    }

    fn normalize_channels(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        (b, c, s): (usize, usize, usize),
    ) -> (Tensor<T>, Vec<T>) {
        let x = self.value(input);
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.numel()];
        let mut out = Tensor::zeros(x.shape());
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * s;
                for j in base..base + s {
                    let h = (x.data()[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out.data_mut()[j] = h * g[ch] + be[ch];
                }
            }
        }
        (out, xhat)
    }

    /// Reverse-mode pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn accumulate_data(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        let t = Tensor::new(self.shape(v), data)?;
        self.accumulate(grads, v, t)
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let ga = g.matmul(&self.value(*b).transpose()?)?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.rg(*b) {
                    let gb = self.value(*a).transpose()?.matmul(g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let d = g.data().iter().zip(vb).map(|(&x, &y)| x * y).collect();
                    self.accumulate_data(grads, *a, d)?;
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(va).map(|(&x, &y)| x * y).collect();
                    self.accumulate_data(grads, *b, d)?;
                }
            }
            Op::AddRowBias(x, bias) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.rg(*bias) {
                    let d = self.shape(*bias)[0];
                    let mut gb = vec![T::zero(); d];
                    for row in g.data().chunks(d) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate_data(grads, *bias, gb)?;
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s))?;
            }
            Op::Relu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate_data(grads, *x, d)?;
            }
            Op::SoftmaxRows(x) => {
                let c = *out.shape().last().expect("matrix");
                let mut d = Vec::with_capacity(out.numel());
                for (y, gy) in out.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    d.extend(y.iter().zip(gy).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                self.accumulate_data(grads, *x, d)?;
            }
            Op::LogSumExpRows(x) => {
                let xv = self.value(*x);
                let c = xv.shape()[1];
                let mut d = Vec::with_capacity(xv.numel());
                for ((row, &lse), &gr) in xv.data().chunks(c).zip(out.data()).zip(g.data()) {
                    d.extend(row.iter().map(|&v| gr * (v - lse).exp()));
                }
                self.accumulate_data(grads, *x, d)?;
            }
            Op::Transpose(x) => {
                self.accumulate(grads, *x, g.transpose()?)?;
            }
            Op::Reshape(x) => {
                self.accumulate_data(grads, *x, g.data().to_vec())?;
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a)[1];
                let cb = self.shape(*b)[1];
                let mut ga = Vec::new();
                let mut gb = Vec::new();
                for row in g.data().chunks(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                self.accumulate_data(grads, *a, ga)?;
                self.accumulate_data(grads, *b, gb)?;
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).numel();
                self.accumulate_data(grads, *a, g.data()[..na].to_vec())?;
                self.accumulate_data(grads, *b, g.data()[na..].to_vec())?;
            }
            Op::SliceRows(x, start) => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    let c = xv.shape()[1];
                    let mut d = vec![T::zero(); xv.numel()];
                    d[start * c..start * c + g.numel()].copy_from_slice(g.data());
                    self.accumulate_data(grads, *x, d)?;
                }
            }
            Op::Gather(x, indices) => {
                if self.rg(*x) {
                    let mut d = vec![T::zero(); self.value(*x).numel()];
                    for (&i, &gv) in indices.iter().zip(g.data()) {
                        d[i] += gv;
                    }
                    self.accumulate_data(grads, *x, d)?;
                }
            }
            Op::NormalizeRows(x, norms) => {
                let c = out.shape()[1];
                let mut d = Vec::with_capacity(out.numel());
                for ((y, gy), &norm) in out.data().chunks(c).zip(g.data().chunks(c)).zip(norms) {
                    let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    d.extend(y.iter().zip(gy).map(|(&yv, &gv)| (gv - yv * dot) / norm));
                }
                self.accumulate_data(grads, *x, d)?;
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv))?;
            }
            Op::Conv2d { input, kernels, bias, geometry } => {
                let cg = conv2d_backward(
                    geometry,
                    self.value(*input).data(),
                    self.value(*kernels).data(),
                    g.data(),
                    self.rg(*input),
                );
                if let Some(gi) = cg.input {
                    self.accumulate_data(grads, *input, gi)?;
                }
                self.accumulate_data(grads, *kernels, cg.kernels)?;
                self.accumulate_data(grads, *bias, cg.bias)?;
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std } => {
                // Reductions and the centring below cancel heavily; keep them in f64.
                let (b, c, s) = channel_layout(out.shape())?;
                let gam = self.value(*gamma).data();
                let gd = g.data();
                let n = (b * s) as f64;
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * s;
                        for j in base..base + s {
                            sum_g[ch] += gd[j].as_f64();
                            sum_gx[ch] += gd[j].as_f64() * xhat[j].as_f64();
                        }
                    }
                }
                if self.rg(*input) {
                    let mut d = vec![T::zero(); out.numel()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let k = gam[ch].as_f64() * inv_std[ch].as_f64() / n;
                            let base = (bi * c + ch) * s;
                            for j in base..base + s {
                                d[j] = T::of(k * (n * gd[j].as_f64() - sum_g[ch] - xhat[j].as_f64() * sum_gx[ch]));
                            }
                        }
                    }
                    self.accumulate_data(grads, *input, d)?;
                }
                self.accumulate_data(grads, *gamma, sum_gx.iter().map(|&v| T::of(v)).collect())?;
                self.accumulate_data(grads, *beta, sum_g.iter().map(|&v| T::of(v)).collect())?;
            }
            Op::ChannelAffine { input, gamma, beta, xhat, inv_std } => {
                let (b, c, s) = channel_layout(out.shape())?;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                let mut d = vec![T::zero(); out.numel()];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * s;
                        for j in base..base + s {
                            let gv = g.data()[j];
                            sum_g[ch] += gv;
                            sum_gx[ch] += gv * xhat[j];
                            d[j] = gv * gam[ch] * inv_std[ch];
                        }
                    }
                }
                self.accumulate_data(grads, *input, d)?;
                self.accumulate_data(grads, *gamma, sum_gx)?;
                self.accumulate_data(grads, *beta, sum_g)?;
            }
        }
        Ok(())
    }
}

/// Numerically stable in-place softmax of one vector.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Softmax of a vector; a single element maps to `[1.0]`.
pub fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn logsumexp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}
