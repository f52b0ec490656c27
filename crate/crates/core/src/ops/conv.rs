//! 2-D cross-correlation via im2col and GEMM.

use crate::error::{config_err, dim_err, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn output_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = size + 2 * padding;
    if padded < kernel {
        return Err(config_err!(
            "kernel {kernel} larger than padded extent {padded}"
        ));
    }
    if (padded - kernel) % stride != 0 {
        return Err(config_err!(
            "output extent ({size}+2*{padding}-{kernel})/{stride}+1 is not integral"
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

pub fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let (batch, in_channels, in_h, in_w) = input.dims4()?;
    let (out_channels, kc, kh, kw) = kernel.dims4()?;
    if kc != in_channels {
        return Err(dim_err!(
            "conv2d: kernel expects {kc} input channels, input has {in_channels}"
        ));
    }
    if kh != kw {
        return Err(dim_err!("conv2d: kernel must be square, got {kh}x{kw}"));
    }
    if kh % 2 == 0 {
        return Err(config_err!("conv2d: kernel size must be odd, got {kh}"));
    }
    if stride == 0 {
        return Err(config_err!("conv2d: stride must be positive"));
    }
    let out_h = output_extent(in_h, kh, stride, padding)?;
    let out_w = output_extent(in_w, kw, stride, padding)?;
    Ok(ConvGeometry {
        batch,
        in_channels,
        in_h,
        in_w,
        out_channels,
        kernel: kh,
        stride,
        padding,
        out_h,
        out_w,
    })
}

/// Valid output-column range for kernel column offset `kj`.
fn valid_range(g: &ConvGeometry, offset: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // input index = o*stride + offset - padding must lie in [0, in_len)
    let lo = if offset >= g.padding {
        0
    } else {
        (g.padding - offset).div_ceil(g.stride)
    };
    let hi_num = in_len + g.padding;
    let hi = if hi_num > offset {
        ((hi_num - offset - 1) / g.stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Samples per GEMM call, keeping the column buffer near `COL_BUDGET` elements.
const COL_BUDGET: usize = 1 << 17;

fn chunk_len(g: &ConvGeometry) -> usize {
    (COL_BUDGET / (g.col_rows() * g.col_cols()).max(1)).clamp(1, g.batch.max(1))
}

/// Writes the columns of one sample into `cols`, whose rows are `ld` long,
/// starting at column `at`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T], ld: usize, at: usize) {
    let k = g.kernel;
    let ncols = g.col_cols();
    for c in 0..g.in_channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            let (oy_lo, oy_hi) = valid_range(g, ki, g.in_h, g.out_h);
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ld + at..row * ld + at + ncols];
                let (ox_lo, ox_hi) = valid_range(g, kj, g.in_w, g.out_w);
                for oy in 0..g.out_h {
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if oy < oy_lo || oy >= oy_hi || ox_lo >= ox_hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ki - g.padding;
                    let src = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                    out_row[..ox_lo].fill(T::zero());
                    out_row[ox_hi..].fill(T::zero());
                    if g.stride == 1 {
                        let ix0 = ox_lo + kj - g.padding;
                        out_row[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            out_row[ox] = src[ox * g.stride + kj - g.padding];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, ld: usize, at: usize, dx: &mut [T]) {
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            let (oy_lo, oy_hi) = valid_range(g, ki, g.in_h, g.out_h);
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ld + at..];
                let (ox_lo, ox_hi) = valid_range(g, kj, g.in_w, g.out_w);
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ki - g.padding;
                    let dst = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    for ox in ox_lo..ox_hi {
                        let ix = ox * g.stride + kj - g.padding;
                        dst[ix] = dst[ix] + src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}

/// Cross-correlates `input` (N×C×H×W) with `kernel` (C'×C×k×k).
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, kernel, stride, padding)?;
    let in_per = g.in_channels * g.in_h * g.in_w;
    let p = g.col_cols();
    let out_per = g.out_channels * p;
    let mut out = vec![T::zero(); g.batch * out_per];
    let chunk = chunk_len(&g);
    let mut cols = vec![T::zero(); g.col_rows() * p * chunk];
    let mut prod = vec![T::zero(); out_per * chunk];
    for n0 in (0..g.batch).step_by(chunk) {
        let b = chunk.min(g.batch - n0);
        let ld = b * p;
        for j in 0..b {
            let n = n0 + j;
            im2col(&input.data()[n * in_per..(n + 1) * in_per], &g, &mut cols, ld, j * p);
        }
        T::gemm(
            false,
            false,
            g.out_channels,
            ld,
            g.col_rows(),
            T::one(),
            kernel.data(),
            &cols[..g.col_rows() * ld],
            T::zero(),
            &mut prod[..g.out_channels * ld],
        );
        for o in 0..g.out_channels {
            for j in 0..b {
                let dst = (n0 + j) * out_per + o * p;
                out[dst..dst + p].copy_from_slice(&prod[o * ld + j * p..o * ld + (j + 1) * p]);
            }
        }
    }
    Tensor::new(vec![g.batch, g.out_channels, g.out_h, g.out_w], out)?.finite("conv2d")
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = conv_geometry(input, kernel, stride, padding)?;
    let expected = [g.batch, g.out_channels, g.out_h, g.out_w];
    if grad_out.shape() != expected {
        return Err(dim_err!(
            "conv2d_backward: output gradient {:?} != {expected:?}",
            grad_out.shape()
        ));
    }
    let in_per = g.in_channels * g.in_h * g.in_w;
    let p = g.col_cols();
    let out_per = g.out_channels * p;
    let rows = g.col_rows();
    let mut grad_in = input.zeros_like();
    let mut grad_k = kernel.zeros_like();
    let chunk = chunk_len(&g);
    let mut cols = vec![T::zero(); rows * p * chunk];
    let mut grad_cols = vec![T::zero(); rows * p * chunk];
    let mut dy = vec![T::zero(); out_per * chunk];
    for n0 in (0..g.batch).step_by(chunk) {
        let b = chunk.min(g.batch - n0);
        let ld = b * p;
        for j in 0..b {
            let n = n0 + j;
            im2col(&input.data()[n * in_per..(n + 1) * in_per], &g, &mut cols, ld, j * p);
            for o in 0..g.out_channels {
                let src = n * out_per + o * p;
                dy[o * ld + j * p..o * ld + (j + 1) * p]
                    .copy_from_slice(&grad_out.data()[src..src + p]);
            }
        }
        // dK += dY (C'×bP) · colsᵀ (bP×Ckk)
        T::gemm(
            false,
            true,
            g.out_channels,
            rows,
            ld,
            T::one(),
            &dy[..g.out_channels * ld],
            &cols[..rows * ld],
            T::one(),
            grad_k.data_mut(),
        );
        T::gemm(
            true,
            false,
            rows,
            ld,
            g.out_channels,
            T::one(),
            kernel.data(),
            &dy[..g.out_channels * ld],
            T::zero(),
            &mut grad_cols[..rows * ld],
        );
        for j in 0..b {
            let n = n0 + j;
            let dx = &mut grad_in.data_mut()[n * in_per..(n + 1) * in_per];
            col2im(&grad_cols, &g, ld, j * p, dx);
        }
    }
    Ok((
        grad_in.finite("conv2d_backward")?,
        grad_k.finite("conv2d_backward")?,
    ))
}

/// Adds a per-channel bias to an N×C×H×W tensor in place.
pub fn add_channel_bias<T: Scalar>(x: &mut Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    let (n, c, h, w) = x.dims4()?;
    if bias.shape() != [c] {
        return Err(dim_err!("bias shape {:?} != [{c}]", bias.shape()));
    }
    let plane = h * w;
    let data = x.data_mut();
    for i in 0..n {
        for (ch, &b) in bias.data().iter().enumerate() {
            let off = (i * c + ch) * plane;
            for v in &mut data[off..off + plane] {
                *v = *v + b;
            }
        }
    }
    Ok(())
}

/// Gradient of [`add_channel_bias`] with respect to the bias.
pub fn channel_bias_grad<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = grad_out.dims4()?;
    let plane = h * w;
    let mut g = vec![T::zero(); c];
    for i in 0..n {
        for (ch, acc) in g.iter_mut().enumerate() {
            let off = (i * c + ch) * plane;
            *acc = grad_out.data()[off..off + plane]
                .iter()
                .fold(*acc, |a, &v| a + v);
        }
    }
    Tensor::new(vec![c], g)
}
