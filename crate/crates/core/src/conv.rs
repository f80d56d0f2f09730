//! im2col-based 2-D convolution kernels over `B x C x H x W` batches.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::Scalar;

/// Static geometry of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output extent along one axis, or `None` when the kernel does not fit.
    pub fn output_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = extent + 2 * padding;
        if stride == 0 || kernel == 0 || kernel > padded {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    pub fn out_height(&self) -> usize {
        Self::output_extent(self.height, self.kernel, self.stride, self.padding).unwrap_or(0)
    }

    pub fn out_width(&self) -> usize {
        Self::output_extent(self.width, self.kernel, self.stride, self.padding).unwrap_or(0)
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Column matrix `[C*k*k, B*Ho*Wo]`, column index `b*Ho*Wo + oy*Wo + ox`.
fn im2col<T: Scalar>(g: &ConvGeometry, input: &[T]) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let ncols = g.batch * plane;
    let mut cols = vec![T::zero(); g.patch_len() * ncols];
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let src = &input[(b * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ki) as isize - pad;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..][..g.width];
                        let dst = &mut dst_row[b * plane + oy * wo..][..wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - pad;
                            if ix >= 0 && ix < g.width as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a column matrix back onto an input-shaped buffer.
fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], grad_input: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let ncols = g.batch * plane;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let dst = &mut grad_input[(b * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ki) as isize - pad;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.width..][..g.width];
                        let src = &src_row[b * plane + oy * wo..][..wo];
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - pad;
                            if ix >= 0 && ix < g.width as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward pass; returns `[B, Co, Ho, Wo]` data.
pub fn conv2d_forward<T: Scalar>(g: &ConvGeometry, input: &[T], kernels: &[T], bias: &[T]) -> Vec<T> {
    let plane = g.out_plane();
    let ncols = g.batch * plane;
    let ck = g.patch_len();
    let cols = im2col(g, input);
    // [Co, B*P]
    let mut tmp = vec![T::zero(); g.out_channels * ncols];
    T::gemm(g.out_channels, ck, ncols, T::one(), kernels, ck, 1, &cols, ncols, 1, T::zero(), &mut tmp, ncols, 1);
    let mut out = vec![T::zero(); g.batch * g.out_channels * plane];
    for co in 0..g.out_channels {
        let bco = bias[co];
        for b in 0..g.batch {
            let src = &tmp[co * ncols + b * plane..][..plane];
            let dst = &mut out[(b * g.out_channels + co) * plane..][..plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bco;
            }
        }
    }
    out
}

/// Gradients of a convolution given the output gradient.
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernels: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    kernels: &[T],
    grad_out: &[T],
    need_input_grad: bool,
) -> ConvGrads<T> {
    let plane = g.out_plane();
    let ncols = g.batch * plane;
    let ck = g.patch_len();
    // grad_out permuted to [Co, B*P]
    let mut gy = vec![T::zero(); g.out_channels * ncols];
    let mut grad_bias = vec![T::zero(); g.out_channels];
    for b in 0..g.batch {
        for co in 0..g.out_channels {
            let src = &grad_out[(b * g.out_channels + co) * plane..][..plane];
            gy[co * ncols + b * plane..][..plane].copy_from_slice(src);
        }
    }
    for (co, gb) in grad_bias.iter_mut().enumerate() {
        *gb = gy[co * ncols..(co + 1) * ncols].iter().copied().sum();
    }
    let cols = im2col(g, input);
    let mut grad_kernels = vec![T::zero(); g.out_channels * ck];
    // gW[Co, CK] = gy[Co, N] * cols^T[N, CK]
    T::gemm(g.out_channels, ncols, ck, T::one(), &gy, ncols, 1, &cols, 1, ncols, T::zero(), &mut grad_kernels, ck, 1);
    let grad_input = need_input_grad.then(|| {
        drop(cols);
        let mut gcols = vec![T::zero(); ck * ncols];
        // gcols[CK, N] = W^T[CK, Co] * gy[Co, N]
        T::gemm(ck, g.out_channels, ncols, T::one(), kernels, 1, ck, &gy, ncols, 1, T::zero(), &mut gcols, ncols, 1);
        let mut gi = vec![T::zero(); input.len()];
        col2im(g, &gcols, &mut gi);
        gi
    });
    ConvGrads { input: grad_input, kernels: grad_kernels, bias: grad_bias }
}
