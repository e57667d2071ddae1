//! im2col convolution kernels (cross-correlation, NCHW layout).
//!
//! A transposed convolution is the adjoint of the convolution described by
//! the same [`ConvGeometry`]: its forward pass is the convolution's input
//! gradient and vice versa.

use super::gemm::gemm;
use super::{Result, TensorError};

/// Shapes of a strided convolution `input (n×c×h×w) -> output (n×f×oh×ow)`
/// with an `f×c×kh×kw` kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Geometry of `conv2d(x, w)` with `x: n×c×h×w`, `w: f×c×kh×kw`.
    pub fn for_conv2d(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidConv("stride must be positive".into()));
        }
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(TensorError::InvalidConv(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        if pad >= kh || pad >= kw {
            return Err(TensorError::InvalidConv(format!(
                "padding {pad} must be smaller than the kernel"
            )));
        }
        Ok(Self {
            batch: x[0],
            in_channels: x[1],
            height: h,
            width: wd,
            out_channels: w[0],
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    /// Geometry of `conv2d_transposed(x, w)` with `x: n×f×h×w` and
    /// `w: f×c×kh×kw`. The returned geometry describes the underlying
    /// convolution, whose *output* has the shape of `x`.
    pub fn for_transposed(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_transposed",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidConv("stride must be positive".into()));
        }
        let (kh, kw) = (w[2], w[3]);
        if pad >= kh || pad >= kw {
            return Err(TensorError::InvalidConv(format!(
                "padding {pad} must be smaller than the kernel"
            )));
        }
        let full_h = (x[2] - 1) * stride + kh;
        let full_w = (x[3] - 1) * stride + kw;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(TensorError::InvalidConv("empty transposed output".into()));
        }
        Ok(Self {
            batch: x[0],
            in_channels: w[1],
            height: full_h - 2 * pad,
            width: full_w - 2 * pad,
            out_channels: w[0],
            kh,
            kw,
            stride,
            pad,
            out_h: x[2],
            out_w: x[3],
        })
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.in_channels, self.height, self.width]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_len(&self) -> usize {
        self.out_channels * self.out_pixels()
    }
}

/// Output columns `lo..hi` whose kernel column `j` lands inside the input.
fn valid_columns(g: &ConvGeometry, j: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(j).div_ceil(g.stride);
    // ox * s + j - pad <= width - 1
    let hi = if g.width + g.pad > j { ((g.width + g.pad - j - 1) / g.stride + 1).min(g.out_w) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one example into rows of a `(c·kh·kw) × ld` patch matrix,
/// writing columns `off..off + oh·ow`.
fn im2col(x: &[f64], g: &ConvGeometry, col: &mut [f64], ld: usize, off: usize) {
    let p = g.out_pixels();
    let (s, pad) = (g.stride as isize, g.pad as isize);
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut col[((c * g.kh + i) * g.kw + j) * ld + off..][..p];
                for oy in 0..g.out_h {
                    let iy = oy as isize * s + i as isize - pad;
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let (lo, hi) = valid_columns(g, j);
                    if lo == hi {
                        dst.fill(0.0);
                        continue;
                    }
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let first = lo * g.stride + j - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (d, v) in dst[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *d = *v;
                        }
                    }
                }
            }
        }
    }
}

/// Folds columns `off..off + oh·ow` of a patch matrix back into one example,
/// accumulating overlapping contributions.
fn col2im(col: &[f64], g: &ConvGeometry, x: &mut [f64], ld: usize, off: usize) {
    let p = g.out_pixels();
    let (s, pad) = (g.stride as isize, g.pad as isize);
    for c in 0..g.in_channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &col[((c * g.kh + i) * g.kw + j) * ld + off..][..p];
                for oy in 0..g.out_h {
                    let iy = oy as isize * s + i as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let (lo, hi) = valid_columns(g, j);
                    if lo == hi {
                        continue;
                    }
                    let first = lo * g.stride + j - g.pad;
                    let src = &row[oy * g.out_w + lo..oy * g.out_w + hi];
                    for (d, v) in dst[first..].iter_mut().step_by(g.stride).zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Patch matrix of the whole batch, `(c·kh·kw) × (n·oh·ow)`.
fn batch_im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let ld = g.batch * g.out_pixels();
    let mut col = vec![0.0; g.patch_len() * ld];
    for n in 0..g.batch {
        im2col(&x[n * g.in_len()..(n + 1) * g.in_len()], g, &mut col, ld, n * g.out_pixels());
    }
    col
}

/// `n × f × p` to `f × (n·p)`.
fn batch_to_channel_major(t: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (f, p) = (g.out_channels, g.out_pixels());
    let ld = g.batch * p;
    let mut out = vec![0.0; f * ld];
    for n in 0..g.batch {
        for o in 0..f {
            out[o * ld + n * p..][..p].copy_from_slice(&t[(n * f + o) * p..][..p]);
        }
    }
    out
}

/// Patch-matrix budget per gemm, in elements. Larger buffers fall out of
/// cache and cost more in memory traffic than the bigger gemm saves.
const CHUNK_ELEMS: usize = 1 << 15;

/// Splits the batch into runs of examples whose patch matrix fits the budget.
fn chunks(g: &ConvGeometry) -> impl Iterator<Item = (usize, ConvGeometry)> + '_ {
    let per = (CHUNK_ELEMS / (g.patch_len() * g.out_pixels()).max(1)).max(1);
    (0..g.batch).step_by(per).map(move |n0| {
        (
            n0,
            ConvGeometry {
                batch: per.min(g.batch - n0),
                ..*g
            },
        )
    })
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut out = Vec::with_capacity(g.batch * g.out_len());
    for (n0, sub) in chunks(g) {
        out.extend(forward_block(&x[n0 * g.in_len()..(n0 + sub.batch) * g.in_len()], w, &sub));
    }
    out
}

/// Gradient of the convolution with respect to its input; also the forward
/// pass of the transposed convolution.
pub(crate) fn conv2d_input_grad(grad_out: &[f64], w: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut dx = Vec::with_capacity(g.batch * g.in_len());
    for (n0, sub) in chunks(g) {
        dx.extend(input_grad_block(&grad_out[n0 * g.out_len()..(n0 + sub.batch) * g.out_len()], w, &sub));
    }
    dx
}

/// Gradient of the convolution with respect to its kernel.
pub(crate) fn conv2d_weight_grad(x: &[f64], grad_out: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut dw = vec![0.0; g.out_channels * g.patch_len()];
    for (n0, sub) in chunks(g) {
        weight_grad_block(
            &x[n0 * g.in_len()..(n0 + sub.batch) * g.in_len()],
            &grad_out[n0 * g.out_len()..(n0 + sub.batch) * g.out_len()],
            &sub,
            &mut dw,
        );
    }
    dw
}

fn forward_block(x: &[f64], w: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (k, p, f) = (g.patch_len(), g.out_pixels(), g.out_channels);
    let ld = g.batch * p;
    let col = batch_im2col(x, g);
    let mut tmp = vec![0.0; f * ld];
    gemm(f, k, ld, w, false, &col, false, &mut tmp, 0.0);
    let mut out = vec![0.0; g.batch * g.out_len()];
    for n in 0..g.batch {
        for o in 0..f {
            out[(n * f + o) * p..][..p].copy_from_slice(&tmp[o * ld + n * p..][..p]);
        }
    }
    out
}

fn input_grad_block(grad_out: &[f64], w: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (k, p) = (g.patch_len(), g.out_pixels());
    let ld = g.batch * p;
    let go = batch_to_channel_major(grad_out, g);
    let mut col = vec![0.0; k * ld];
    gemm(k, g.out_channels, ld, w, true, &go, false, &mut col, 0.0);
    let mut dx = vec![0.0; g.batch * g.in_len()];
    for n in 0..g.batch {
        col2im(&col, g, &mut dx[n * g.in_len()..(n + 1) * g.in_len()], ld, n * p);
    }
    dx
}

fn weight_grad_block(x: &[f64], grad_out: &[f64], g: &ConvGeometry, dw: &mut [f64]) {
    let k = g.patch_len();
    let ld = g.batch * g.out_pixels();
    let col = batch_im2col(x, g);
    let go = batch_to_channel_major(grad_out, g);
    gemm(g.out_channels, ld, k, &go, false, &col, true, dw, 1.0);
}

