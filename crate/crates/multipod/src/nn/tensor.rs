//! NHWC feature batches, convolution geometry, and the im2col/matmul
//! kernels every layer is built on.

use crate::error::{Error, Result};
use crate::nn::Real;

/// Batch of feature maps, NHWC, sample-major so each sample is one
/// contiguous slice (the unit of data parallelism).
#[derive(Clone, Debug, PartialEq)]
pub struct Feat<F> {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<F>,
}

impl<F: Real> Feat<F> {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Feat {
            n,
            h,
            w,
            c,
            data: vec![F::zero(); n * h * w * c],
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.n, other.h, other.w, other.c)
    }

    /// Elements per sample.
    pub fn stride(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn idx(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        debug_assert!(n < self.n && y < self.h && x < self.w && c < self.c);
        ((n * self.h + y) * self.w + x) * self.c + c
    }

    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> F {
        self.data[self.idx(n, y, x, c)]
    }

    pub fn at_mut(&mut self, n: usize, y: usize, x: usize, c: usize) -> &mut F {
        let i = self.idx(n, y, x, c);
        &mut self.data[i]
    }

    pub fn sample(&self, n: usize) -> &[F] {
        let s = self.stride();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [F] {
        let s = self.stride();
        &mut self.data[n * s..(n + 1) * s]
    }
}

/// Convolution window geometry.
///
/// `offset` shifts the first window along both axes *after* padding; it lets
/// a 1×1 stride-2 projection sample the same grid as a 3×3 stride-2 valid
/// convolution's window centers (input row `2·oy + 1`), keeping residual
/// shortcut shapes aligned with the main path without extra padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub offset: usize,
}

impl ConvGeom {
    /// 3×3, stride 1, pad 1: shape-preserving.
    pub fn same3() -> Self {
        ConvGeom {
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
            offset: 0,
        }
    }

    /// 3×3, stride 2, no padding: the downsampling conv (35→17→8).
    pub fn down3() -> Self {
        ConvGeom {
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 0,
            offset: 0,
        }
    }

    /// 1×1, stride 2, offset 1: projection shortcut matched to [`down3`]'s
    /// window centers.
    pub fn proj1() -> Self {
        ConvGeom {
            kh: 1,
            kw: 1,
            stride: 2,
            pad: 0,
            offset: 1,
        }
    }

    /// 7×7, stride 1, pad 3: shape-preserving front-end filter window.
    pub fn bank7() -> Self {
        ConvGeom {
            kh: 7,
            kw: 7,
            stride: 1,
            pad: 3,
            offset: 0,
        }
    }

    pub fn out_dim(&self, size: usize, k: usize) -> Result<usize> {
        let span = size + 2 * self.pad;
        if span < k + self.offset {
            return Err(Error::geometry(
                "conv",
                format!("window {k}+{} exceeds padded extent {span}", self.offset),
            ));
        }
        Ok((span - k - self.offset) / self.stride + 1)
    }

    pub fn out_shape(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((self.out_dim(h, self.kh)?, self.out_dim(w, self.kw)?))
    }

    /// im2col row length for `in_c` input channels.
    pub fn k(&self, in_c: usize) -> usize {
        self.kh * self.kw * in_c
    }

    /// Input row/col for output position `o` and kernel tap `t`, or `None`
    /// when the tap lands in the zero padding.
    #[inline]
    fn src(&self, o: usize, t: usize, size: usize) -> Option<usize> {
        let i = (o * self.stride + self.offset + t) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < size).then_some(i as usize)
    }
}

/// Unpack one NHWC sample into an im2col matrix of shape `P×K` where
/// `P = out_h·out_w` and `K = kh·kw·c`, row-major. Column order within a row
/// is `(ky, kx, ic)`, matching the channel-contiguous input layout so each
/// in-bounds tap is a single memcpy of `c` values. Padding taps become zeros.
pub fn im2col<F: Real>(
    sample: &[F],
    h: usize,
    w: usize,
    c: usize,
    geom: &ConvGeom,
    out_h: usize,
    out_w: usize,
    cols: &mut [F],
) {
    let k = geom.k(c);
    debug_assert_eq!(sample.len(), h * w * c);
    debug_assert_eq!(cols.len(), out_h * out_w * k);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = &mut cols[(oy * out_w + ox) * k..(oy * out_w + ox + 1) * k];
            for ky in 0..geom.kh {
                let iy = geom.src(oy, ky, h);
                for kx in 0..geom.kw {
                    let dst = &mut row[(ky * geom.kw + kx) * c..(ky * geom.kw + kx + 1) * c];
                    match (iy, geom.src(ox, kx, w)) {
                        (Some(iy), Some(ix)) => {
                            dst.copy_from_slice(&sample[(iy * w + ix) * c..(iy * w + ix + 1) * c]);
                        }
                        _ => dst.fill(F::zero()),
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add an im2col-shaped gradient back onto the
/// input sample. Accumulation order is fixed (output position, then tap, then
/// channel), independent of any parallel split above it.
pub fn col2im_add<F: Real>(
    cols: &[F],
    h: usize,
    w: usize,
    c: usize,
    geom: &ConvGeom,
    out_h: usize,
    out_w: usize,
    sample: &mut [F],
) {
    let k = geom.k(c);
    debug_assert_eq!(sample.len(), h * w * c);
    debug_assert_eq!(cols.len(), out_h * out_w * k);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = &cols[(oy * out_w + ox) * k..(oy * out_w + ox + 1) * k];
            for ky in 0..geom.kh {
                let Some(iy) = geom.src(oy, ky, h) else { continue };
                for kx in 0..geom.kw {
                    let Some(ix) = geom.src(ox, kx, w) else { continue };
                    let src = &row[(ky * geom.kw + kx) * c..(ky * geom.kw + kx + 1) * c];
                    let dst = &mut sample[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// `cmat (P×OC) += a (P×K) · b (K×OC)`.
///
/// Row-by-row axpy: for each output element the contributions arrive in
/// ascending `kk`, a fixed order shared by every caller. Zero entries of `a`
/// (padding, post-ReLU zeros) are skipped; fused multiply-add throughout.
pub fn matmul_acc<F: Real>(a: &[F], b: &[F], cmat: &mut [F], p: usize, k: usize, oc: usize) {
    debug_assert_eq!(a.len(), p * k);
    debug_assert_eq!(b.len(), k * oc);
    debug_assert_eq!(cmat.len(), p * oc);
    for pi in 0..p {
        let arow = &a[pi * k..(pi + 1) * k];
        let crow = &mut cmat[pi * oc..(pi + 1) * oc];
        for (kk, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let brow = &b[kk * oc..(kk + 1) * oc];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = av.mul_add(bv, *cv);
            }
        }
    }
}

/// `da (P×K) = dc (P×OC) · bᵀ` — both operand rows are contiguous, so each
/// entry is one dot product.
pub fn matmul_bt<F: Real>(dc: &[F], b: &[F], da: &mut [F], p: usize, k: usize, oc: usize) {
    debug_assert_eq!(dc.len(), p * oc);
    debug_assert_eq!(b.len(), k * oc);
    debug_assert_eq!(da.len(), p * k);
    for pi in 0..p {
        let dcrow = &dc[pi * oc..(pi + 1) * oc];
        for kk in 0..k {
            let brow = &b[kk * oc..(kk + 1) * oc];
            let mut acc = F::zero();
            for (&dv, &bv) in dcrow.iter().zip(brow) {
                acc = dv.mul_add(bv, acc);
            }
            da[pi * k + kk] = acc;
        }
    }
}

/// `dw (K×OC) += aᵀ (K×P) · dc (P×OC)`, accumulating over `p` in ascending
/// order — the weight-gradient kernel.
pub fn accum_outer<F: Real>(a: &[F], dc: &[F], dw: &mut [F], p: usize, k: usize, oc: usize) {
    debug_assert_eq!(a.len(), p * k);
    debug_assert_eq!(dc.len(), p * oc);
    debug_assert_eq!(dw.len(), k * oc);
    for pi in 0..p {
        let arow = &a[pi * k..(pi + 1) * k];
        let dcrow = &dc[pi * oc..(pi + 1) * oc];
        for (kk, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let dwrow = &mut dw[kk * oc..(kk + 1) * oc];
            for (wv, &dv) in dwrow.iter_mut().zip(dcrow) {
                *wv = av.mul_add(dv, *wv);
            }
        }
    }
}
