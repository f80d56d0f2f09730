//! Seven-layer patch CNN producing a 128-D local visual feature per patch.
//!
//! | layer | kernel | filters | stride | padding | output (128 px input) |
//! |-------|--------|---------|--------|---------|-----------------------|
//! | 1     | 3x3    | 16      | 1      | 1       | 128x128x16            |
//! | 2     | 3x3    | 16      | 2      | 1       | 64x64x16              |
//! | 3     | 3x3    | 32      | 2      | 1       | 32x32x32              |
//! | 4     | 3x3    | 64      | 2      | 1       | 16x16x64              |
//! | 5     | 3x3    | 128     | 2      | 1       | 8x8x128               |
//! | 6     | 3x3    | 128     | 1      | 1       | 8x8x128               |
//! | 7     | 8x8    | 128     | 1      | none    | 1x128                 |
//!
//! Layers 1-6 are convolution + batch norm + ReLU; layer 7 is convolution +
//! batch norm. With a smaller patch side the last kernel spans the remaining
//! `side / 16` extent, so the output is always `1 x 128`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::imaging::Patch;
use crate::nn::{bind_tensor, join, normal_tensor, Mode, Parameters};
use crate::scalar::Scalar;
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::Tensor;

pub const FILTERS: [usize; 7] = [16, 16, 32, 64, 128, 128, 128];
pub const STRIDES: [usize; 7] = [1, 2, 2, 2, 2, 1, 1];
pub const PADDING: [usize; 7] = [1, 1, 1, 1, 1, 1, 0];
pub const DESCRIPTOR_DIM: usize = 128;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Convolution + batch norm (+ optional ReLU).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub bn_gamma: Tensor<T>,
    pub bn_beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    pub relu: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvBlockVars {
    pub weight: Var,
    pub bias: Var,
    pub bn_gamma: Var,
    pub bn_beta: Var,
}

impl<T: Scalar> ConvBlock<T> {
    /// He-initialised kernels (`std = sqrt(2 / fan_in)`), zero bias, unit scale.
    pub fn init<R: Rng + ?Sized>(in_c: usize, out_c: usize, k: usize, stride: usize, padding: usize, relu: bool, rng: &mut R) -> Self {
        let fan_in = in_c * k * k;
        Self {
            weight: normal_tensor(&[out_c, in_c, k, k], libm::sqrt(2.0 / fan_in as f64), rng),
            bias: Tensor::zeros(&[out_c]),
            bn_gamma: Tensor::full(&[out_c], T::one()),
            bn_beta: Tensor::zeros(&[out_c]),
            running_mean: Tensor::zeros(&[out_c]),
            running_var: Tensor::full(&[out_c], T::one()),
            stride,
            padding,
            relu,
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool, order: &mut Vec<Var>) -> ConvBlockVars {
        ConvBlockVars {
            weight: bind_tensor(tape, &self.weight, trainable, order),
            bias: bind_tensor(tape, &self.bias, trainable, order),
            bn_gamma: bind_tensor(tape, &self.bn_gamma, trainable, order),
            bn_beta: bind_tensor(tape, &self.bn_beta, trainable, order),
        }
    }

    /// Exponential moving average toward the given batch statistics.
    pub fn update_running(&mut self, stats: &BatchStats<T>, momentum: T) {
        let keep = T::one() - momentum;
        for (r, &m) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + momentum * m;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + momentum * v;
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, vars: &ConvBlockVars, x: Var, mode: Mode) -> Result<(Var, Option<BatchStats<T>>)> {
        let y = tape.conv2d(x, vars.weight, vars.bias, self.stride, self.padding)?;
        let eps = T::of(BN_EPS);
        let (y, stats) = match mode {
            Mode::Train => {
                let (y, s) = tape.batch_norm_train(y, vars.bn_gamma, vars.bn_beta, eps)?;
                (y, Some(s))
            }
            Mode::Eval => {
                let y = tape.batch_norm_eval(
                    y,
                    vars.bn_gamma,
                    vars.bn_beta,
                    self.running_mean.data(),
                    self.running_var.data(),
                    eps,
                )?;
                (y, None)
            }
        };
        Ok((if self.relu { tape.relu(y) } else { y }, stats))
    }
}

/// Parameters of the descriptor CNN.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnParams<T> {
    pub layers: Vec<ConvBlock<T>>,
    patch_side: usize,
}

/// Spatial `(height, width, channels)` of each layer's output for a patch side.
pub fn layer_output_shapes(patch_side: usize) -> Result<[(usize, usize, usize); 7]> {
    check_patch_side(patch_side)?;
    let mut out = [(0, 0, 0); 7];
    let mut extent = patch_side;
    for l in 0..7 {
        let k = if l == 6 { patch_side / 16 } else { 3 };
        extent = (extent + 2 * PADDING[l] - k) / STRIDES[l] + 1;
        out[l] = (extent, extent, FILTERS[l]);
    }
    Ok(out)
}

fn check_patch_side(side: usize) -> Result<()> {
    if side < 16 || side % 16 != 0 {
        return Err(shape_err!("patch side must be a positive multiple of 16, got {side}"));
    }
    Ok(())
}

impl<T: Scalar> CnnParams<T> {
    /// Deterministic He initialisation for the given patch side.
    pub fn init<R: Rng + ?Sized>(patch_side: usize, rng: &mut R) -> Result<Self> {
        check_patch_side(patch_side)?;
        let mut layers = Vec::with_capacity(7);
        let mut in_c = 1;
        for l in 0..7 {
            let k = if l == 6 { patch_side / 16 } else { 3 };
            layers.push(ConvBlock::init(in_c, FILTERS[l], k, STRIDES[l], PADDING[l], l < 6, rng));
            in_c = FILTERS[l];
        }
        Ok(Self { layers, patch_side })
    }

    /// Wraps loaded layers; the patch side follows from the last kernel size.
    pub fn from_layers(layers: Vec<ConvBlock<T>>) -> Result<Self> {
        if layers.len() != 7 {
            return Err(shape_err!("descriptor CNN has 7 layers, got {}", layers.len()));
        }
        let side = layers[6].kernel_size() * 16;
        let s = Self { layers, patch_side: side };
        s.check_architecture()?;
        Ok(s)
    }

    pub fn patch_side(&self) -> usize {
        self.patch_side
    }

    /// Verifies every layer's kernel shape, stride and padding.
    pub fn check_architecture(&self) -> Result<()> {
        check_patch_side(self.patch_side)?;
        let mut in_c = 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let k = if l == 6 { self.patch_side / 16 } else { 3 };
            let want = [FILTERS[l], in_c, k, k];
            if layer.weight.shape() != want
                || layer.stride != STRIDES[l]
                || layer.padding != PADDING[l]
                || layer.relu != (l < 6)
            {
                return Err(shape_err!(
                    "layer {} is {:?}/s{}/p{}, expected {want:?}/s{}/p{}",
                    l + 1,
                    layer.weight.shape(),
                    layer.stride,
                    layer.padding,
                    STRIDES[l],
                    PADDING[l]
                ));
            }
            in_c = FILTERS[l];
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool, order: &mut Vec<Var>) -> Vec<ConvBlockVars> {
        self.layers.iter().map(|l| l.bind(tape, trainable, order)).collect()
    }

    /// Runs the network on a `[B, 1, S, S]` batch, giving `[B, 128]`.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[ConvBlockVars], patches: Var, mode: Mode) -> Result<CnnForward<T>> {
        match *tape.shape(patches) {
            [_, 1, h, w] if h == self.patch_side && w == self.patch_side => {}
            ref s => {
                return Err(shape_err!(
                    "expected patches [B, 1, {0}, {0}], got {s:?}",
                    self.patch_side
                ))
            }
        }
        let mut x = patches;
        let mut stats = Vec::new();
        let mut shapes = Vec::with_capacity(7);
        for (layer, v) in self.layers.iter().zip(vars) {
            let (y, s) = layer.forward(tape, v, x, mode)?;
            let sh = tape.shape(y);
            shapes.push((sh[2], sh[3], sh[1]));
            stats.extend(s);
            x = y;
        }
        let b = tape.shape(x)[0];
        let features = tape.reshape(x, &[b, DESCRIPTOR_DIM])?;
        Ok(CnnForward { features, layer_shapes: shapes, batch_stats: stats })
    }

    pub fn update_running(&mut self, stats: &[BatchStats<T>]) {
        let momentum = T::of(BN_MOMENTUM);
        for (layer, s) in self.layers.iter_mut().zip(stats) {
            layer.update_running(s, momentum);
        }
    }

    /// Descriptor of every patch. Train mode normalises with batch
    /// statistics and updates the running averages; eval mode leaves the
    /// parameters untouched.
    pub fn describe(&mut self, patches: &[Patch], mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut order = Vec::new();
        let vars = self.bind(&mut tape, false, &mut order);
        let batch = tape.constant(patch_batch(patches, self.patch_side)?);
        let out = self.forward(&mut tape, &vars, batch, mode)?;
        if mode == Mode::Train {
            self.update_running(&out.batch_stats);
        }
        Ok(tape.value(out.features).clone())
    }
}

/// Output of [`CnnParams::forward`].
#[derive(Debug)]
pub struct CnnForward<T> {
    pub features: Var,
    /// `(height, width, channels)` after each layer.
    pub layer_shapes: Vec<(usize, usize, usize)>,
    pub batch_stats: Vec<BatchStats<T>>,
}

/// Stacks patches into a `[B, 1, S, S]` tensor.
pub fn patch_batch<T: Scalar>(patches: &[Patch], side: usize) -> Result<Tensor<T>> {
    if patches.is_empty() {
        return Err(shape_err!("empty patch batch"));
    }
    let mut data = Vec::with_capacity(patches.len() * side * side);
    for p in patches {
        if p.side != side || p.pixels.len() != side * side {
            return Err(shape_err!("patch side {} does not match network input {side}", p.side));
        }
        data.extend(p.pixels.iter().map(|&v| T::of(v as f64)));
    }
    Tensor::new(&[patches.len(), 1, side, side], data)
}

impl<T: Scalar> Parameters<T> for CnnParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("layer{}", i + 1));
            f(join(&p, "weight"), &l.weight);
            f(join(&p, "bias"), &l.bias);
            f(join(&p, "bn_gamma"), &l.bn_gamma);
            f(join(&p, "bn_beta"), &l.bn_beta);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &format!("layer{}", i + 1));
            f(join(&p, "weight"), &mut l.weight);
            f(join(&p, "bias"), &mut l.bias);
            f(join(&p, "bn_gamma"), &mut l.bn_gamma);
            f(join(&p, "bn_beta"), &mut l.bn_beta);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("layer{}", i + 1));
            f(join(&p, "running_mean"), &l.running_mean);
            f(join(&p, "running_var"), &l.running_var);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &format!("layer{}", i + 1));
            f(join(&p, "running_mean"), &mut l.running_mean);
            f(join(&p, "running_var"), &mut l.running_var);
        }
    }
}
