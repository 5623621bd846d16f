//! Untaped numeric kernels: GEMM variants, im2col/col2im and direct
//! depthwise convolution. All loops run in a fixed order so results are
//! bit-reproducible.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let mut bt = vec![T::zero(); k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    gemm_nn(a, &bt, c, m, k, n);
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Spatial geometry of one square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if k == 0 || stride == 0 {
            return Err(Error::invalid(format!(
                "kernel {k} and stride {stride} must be >= 1"
            )));
        }
        let out = |x: usize| -> Result<usize> {
            let span = x + 2 * pad;
            if span < k {
                return Err(Error::shape(
                    "conv2d",
                    format!("non-positive output extent: input {x}, pad {pad}, kernel {k}"),
                ));
            }
            Ok((span - k) / stride + 1)
        };
        Ok(Self {
            channels,
            h,
            w,
            k,
            stride,
            pad,
            out_h: out(h)?,
            out_w: out(w)?,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.h * self.w
    }

    /// Input row for output row `oy` at kernel row `ky`, if inside.
    #[inline]
    fn row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky)
            .checked_sub(self.pad)
            .filter(|&y| y < self.h)
    }

    /// Output columns `lo..hi` whose tap `kx` lands inside the input.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(s)
        };
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / s + 1).min(self.out_w)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Unfolds one `[C,H,W]` sample into a `[C*k*k, out_h*out_w]` column matrix.
/// Row index is `(c*k + ky)*k + kx`, matching a flattened `[C_out, C, k, k]`
/// weight.
pub fn im2col<T: Scalar>(input: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.positions();
    debug_assert_eq!(cols.len(), g.patch_len() * p);
    cols.fill(T::zero());
    for c in 0..g.channels {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..g.out_h {
                    let Some(y) = g.row(oy, ky) else { continue };
                    let d = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let src = &plane[y * g.w..(y + 1) * g.w];
                    for ox in lo..hi {
                        d[ox] = src[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, input: &mut [T]) {
    let p = g.positions();
    for c in 0..g.channels {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..g.out_h {
                    let Some(y) = g.row(oy, ky) else { continue };
                    let s = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut input[(c * g.h + y) * g.w..(c * g.h + y + 1) * g.w];
                    for ox in lo..hi {
                        dst[ox * g.stride + kx - g.pad] += s[ox];
                    }
                }
            }
        }
    }
}

/// Direct depthwise convolution of one sample; `weight` is `[C, k, k]`.
pub fn depthwise_forward<T: Scalar>(input: &[T], weight: &[T], g: &ConvGeom, out: &mut [T]) {
    let kk = g.k * g.k;
    let p = g.positions();
    for c in 0..g.channels {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        let wk = &weight[c * kk..(c + 1) * kk];
        let dst = &mut out[c * p..(c + 1) * p];
        dst.fill(T::zero());
        for ky in 0..g.k {
            for kx in 0..g.k {
                let wv = wk[ky * g.k + kx];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..g.out_h {
                    let Some(y) = g.row(oy, ky) else { continue };
                    let d = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let src = &plane[y * g.w..(y + 1) * g.w];
                    if g.stride == 1 {
                        let off = kx as isize - g.pad as isize;
                        let s = &src[(lo as isize + off) as usize..(hi as isize + off) as usize];
                        for (dv, &sv) in d[lo..hi].iter_mut().zip(s) {
                            *dv += wv * sv;
                        }
                    } else {
                        for ox in lo..hi {
                            d[ox] += wv * src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input and weight gradients of [`depthwise_forward`].
pub fn depthwise_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    g: &ConvGeom,
    grad_out: &[T],
    grad_in: Option<&mut [T]>,
    grad_w: Option<&mut [T]>,
) {
    let kk = g.k * g.k;
    let p = g.positions();
    let mut grad_in = grad_in;
    let mut grad_w = grad_w;
    for c in 0..g.channels {
        let base = c * g.h * g.w;
        let go = &grad_out[c * p..(c + 1) * p];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let wi = c * kk + ky * g.k + kx;
                let wv = weight[wi];
                let (lo, hi) = g.col_range(kx);
                let mut gw_acc = T::zero();
                for oy in 0..g.out_h {
                    let Some(y) = g.row(oy, ky) else { continue };
                    let gr = &go[oy * g.out_w..(oy + 1) * g.out_w];
                    let row = base + y * g.w;
                    if g.stride == 1 && lo < hi {
                        let (a, b) = (lo + kx - g.pad, hi + kx - g.pad);
                        if let Some(gi) = grad_in.as_deref_mut() {
                            for (d, &y) in gi[row + a..row + b].iter_mut().zip(&gr[lo..hi]) {
                                *d += y * wv;
                            }
                        }
                        if grad_w.is_some() {
                            for (&y, &v) in gr[lo..hi].iter().zip(&input[row + a..row + b]) {
                                gw_acc += y * v;
                            }
                        }
                        continue;
                    }
                    if let Some(gi) = grad_in.as_deref_mut() {
                        let gi = &mut gi[row..row + g.w];
                        for ox in lo..hi {
                            gi[ox * g.stride + kx - g.pad] += gr[ox] * wv;
                        }
                    }
                    if grad_w.is_some() {
                        let src = &input[row..row + g.w];
                        for ox in lo..hi {
                            gw_acc += gr[ox] * src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
                if let Some(gw) = grad_w.as_deref_mut() {
                    gw[wi] += gw_acc;
                }
            }
        }
    }
}
