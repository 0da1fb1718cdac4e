//! Numeric kernels shared by forward evaluation and both backward modes.
//!
//! Images are single `C x H x W` tensors (no batch axis). Convolution goes
//! through im2col and a gemm.

use crate::tensor::Scalar;

/// Row-major matmul `C = op(A) * op(B)` where `op` optionally transposes.
/// `a` is stored as `m x k` (or `k x m` when `trans_a`), `b` as `k x n`
/// (or `n x k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths checked above; strides describe the stated layouts.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn out_len(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Source pixel for kernel tap `(ky, kx)` at output `(oy, ox)`, or
    /// `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let cols = oh * ow;
    let mut out = vec![T::zero(); g.patch_len() * cols];
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    for ox in 0..ow {
                        if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                            dst[oy * ow + ox] = plane[y * g.width + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Scalar>(cols_data: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let cols = oh * ow;
    let mut out = vec![T::zero(); g.channels * g.height * g.width];
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols_data[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    for ox in 0..ow {
                        if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                            plane[y * g.width + xx] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    let cols = im2col(x, g);
    let n = g.out_len();
    let mut out = vec![T::zero(); g.out_channels * n];
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            out[o * n..(o + 1) * n].fill(bv);
        }
    }
    gemm(
        g.out_channels,
        g.patch_len(),
        n,
        w,
        false,
        &cols,
        false,
        &mut out,
        bias.is_some(),
    );
    out
}

/// Gradient of `conv2d` with respect to its input (a transposed convolution).
pub(crate) fn conv2d_input_grad<T: Scalar>(gy: &[T], w: &[T], g: &ConvGeometry) -> Vec<T> {
    let n = g.out_len();
    let mut cols = vec![T::zero(); g.patch_len() * n];
    gemm(
        g.patch_len(),
        g.out_channels,
        n,
        w,
        true,
        gy,
        false,
        &mut cols,
        false,
    );
    col2im(&cols, g)
}

pub(crate) fn conv2d_weight_grad<T: Scalar>(x: &[T], gy: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols = im2col(x, g);
    let n = g.out_len();
    let mut dw = vec![T::zero(); g.out_channels * g.patch_len()];
    gemm(
        g.out_channels,
        n,
        g.patch_len(),
        gy,
        false,
        &cols,
        true,
        &mut dw,
        false,
    );
    dw
}

pub(crate) fn conv2d_bias_grad<T: Scalar>(gy: &[T], out_channels: usize) -> Vec<T> {
    let n = gy.len() / out_channels;
    (0..out_channels)
        .map(|o| {
            T::from_f64(
                gy[o * n..(o + 1) * n]
                    .iter()
                    .map(|v| v.as_f64())
                    .sum::<f64>(),
            )
        })
        .collect()
}

/// Max pooling over each channel; returns values and flat argmax indices
/// into the input. Ties resolve to the first element in row-major order.
pub(crate) fn maxpool<T: Scalar>(
    x: &[T],
    channels: usize,
    height: usize,
    width: usize,
    size: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>) {
    let oh = (height - size) / stride + 1;
    let ow = (width - size) / stride + 1;
    let mut out = Vec::with_capacity(channels * oh * ow);
    let mut arg = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let base = c * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * width + ox * stride;
                for ky in 0..size {
                    for kx in 0..size {
                        let idx = base + (oy * stride + ky) * width + ox * stride + kx;
                        if x[idx] > x[best] || (x[idx].is_nan() && !x[best].is_nan()) {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample_nearest<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (uh, uw) = (h * f, w * f);
    let mut out = vec![T::zero(); planes * uh * uw];
    for p in 0..planes {
        for y in 0..uh {
            for xx in 0..uw {
                out[(p * uh + y) * uw + xx] = x[(p * h + y / f) * w + xx / f];
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest`]: sums each `f x f` block.
pub(crate) fn block_sum<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (uh, uw) = (h * f, w * f);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..uh {
            for xx in 0..uw {
                out[(p * h + y / f) * w + xx / f] += x[(p * uh + y) * uw + xx];
            }
        }
    }
    out
}

/// Stable softmax.
pub(crate) fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(logits)[target]`, computed through log-sum-exp.
pub(crate) fn cross_entropy<T: Scalar>(logits: &[T], target: usize) -> T {
    let max = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln() + max;
    lse - logits[target]
}
