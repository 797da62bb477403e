//! Trainable layers: convolution, shared-kernel front-end filters, batch
//! norm, ReLU, global average pooling, linear, and the residual block.
//!
//! Layers cache what their backward pass needs when `train` is true and
//! release it on the matching `backward` call. All heavy loops go through
//! [`crate::par`], so the determinism contract from [`crate::nn`] holds.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::tensor::{accum_outer, col2im_add, im2col, matmul_acc, matmul_bt, ConvGeom, Feat};
use crate::nn::Real;
use crate::par;

/// Mutable view of one parameter tensor during visitation. Visitation order
/// is the architecture order and is the contract behind optimizer state,
/// checkpoints, and parameter counting.
pub struct ParamView<'a, F> {
    pub name: String,
    pub value: &'a mut [F],
    pub grad: &'a mut [F],
    pub trainable: bool,
}

/// Mutable view of a non-learned state tensor (batch-norm running stats).
pub struct BufferView<'a, F> {
    pub name: String,
    pub value: &'a mut [F],
}

pub type ParamFn<'v, F> = dyn FnMut(ParamView<'_, F>) + 'v;
pub type BufferFn<'v, F> = dyn FnMut(BufferView<'_, F>) + 'v;

fn he_normal<F: Real>(n: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Vec<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| F::lit(dist.sample(rng))).collect()
}

/// `dst += src`, element-wise, split by sample.
pub fn add_assign_feat<F: Real>(dst: &mut Feat<F>, src: &Feat<F>, parallel: bool) {
    debug_assert_eq!(dst.data.len(), src.data.len());
    let stride = dst.stride();
    par::chunks_mut_indexed(parallel, &mut dst.data, stride, |n, chunk| {
        for (d, s) in chunk.iter_mut().zip(src.sample(n)) {
            *d += *s;
        }
    });
}

// ---------------------------------------------------------------------------
// Conv2d

/// Bias-free 2-D convolution (batch norm follows every instance). Weights are
/// stored as an im2col operand: `K×OC` with `K = (ky, kx, ic)` row order.
#[derive(Clone, Debug)]
pub struct Conv2d<F> {
    pub in_c: usize,
    pub out_c: usize,
    pub geom: ConvGeom,
    pub w: Vec<F>,
    pub gw: Vec<F>,
    cache: Option<Feat<F>>,
}

impl<F: Real> Conv2d<F> {
    pub fn new(in_c: usize, out_c: usize, geom: ConvGeom, rng: &mut ChaCha8Rng) -> Self {
        let k = geom.k(in_c);
        Conv2d {
            in_c,
            out_c,
            geom,
            w: he_normal(k * out_c, k, rng),
            gw: vec![F::zero(); k * out_c],
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Feat<F>, train: bool, parallel: bool) -> Result<Feat<F>> {
        if x.c != self.in_c {
            return Err(Error::geometry(
                "conv",
                format!("input has {} channels, layer expects {}", x.c, self.in_c),
            ));
        }
        let (oh, ow) = self.geom.out_shape(x.h, x.w)?;
        let k = self.geom.k(self.in_c);
        let mut y = Feat::zeros(x.n, oh, ow, self.out_c);
        let (geom, wmat, out_c) = (self.geom, &self.w, self.out_c);
        let stride = y.stride();
        par::chunks_mut_indexed(parallel, &mut y.data, stride, |n, chunk| {
            let mut cols = vec![F::zero(); oh * ow * k];
            im2col(x.sample(n), x.h, x.w, x.c, &geom, oh, ow, &mut cols);
            matmul_acc(&cols, wmat, chunk, oh * ow, k, out_c);
        });
        if train {
            self.cache = Some(x.clone());
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Feat<F>, parallel: bool) -> Feat<F> {
        let x = self.cache.take().expect("conv backward without cached forward");
        let (oh, ow) = (dy.h, dy.w);
        let k = self.geom.k(self.in_c);
        let (geom, wmat, out_c) = (self.geom, &self.w, self.out_c);
        let per_sample = par::map_indexed(parallel, x.n, |n| {
            let mut cols = vec![F::zero(); oh * ow * k];
            im2col(x.sample(n), x.h, x.w, x.c, &geom, oh, ow, &mut cols);
            let mut dw = vec![F::zero(); k * out_c];
            accum_outer(&cols, dy.sample(n), &mut dw, oh * ow, k, out_c);
            let mut da = cols; // reuse the allocation
            matmul_bt(dy.sample(n), wmat, &mut da, oh * ow, k, out_c);
            let mut dx = vec![F::zero(); x.stride()];
            col2im_add(&da, x.h, x.w, x.c, &geom, oh, ow, &mut dx);
            (dx, dw)
        });
        let mut dx = Feat::zeros_like(&x);
        for (n, (dxn, dwn)) in per_sample.into_iter().enumerate() {
            dx.sample_mut(n).copy_from_slice(&dxn);
            for (g, d) in self.gw.iter_mut().zip(&dwn) {
                *g += *d;
            }
        }
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        f(ParamView {
            name: format!("{prefix}.w"),
            value: &mut self.w,
            grad: &mut self.gw,
            trainable: true,
        });
    }
}

// ---------------------------------------------------------------------------
// FilterConv

/// Front-end 7×7 filter layer: one set of 8 kernels applied to *every* input
/// channel (output channel `ic·8 + k`), so the parameter cost is 392 no
/// matter how many channels come in. Initialised either from the directional
/// filter bank or randomly; `trainable = false` freezes the kernels.
#[derive(Clone, Debug)]
pub struct FilterConv<F> {
    pub in_c: usize,
    /// `49×8` im2col operand: tap-major, orientation-minor.
    pub kernels: Vec<F>,
    pub gk: Vec<F>,
    pub trainable: bool,
    cache: Option<Feat<F>>,
}

pub const FILTER_TAPS: usize = 49;
pub const FILTER_COUNT: usize = 8;

impl<F: Real> FilterConv<F> {
    /// Build from explicit kernels in bank layout (`8×49`, orientation-major).
    pub fn from_bank_kernels(in_c: usize, bank: &[f64], trainable: bool) -> Self {
        assert_eq!(bank.len(), FILTER_COUNT * FILTER_TAPS);
        let mut kernels = vec![F::zero(); FILTER_TAPS * FILTER_COUNT];
        for k in 0..FILTER_COUNT {
            for t in 0..FILTER_TAPS {
                kernels[t * FILTER_COUNT + k] = F::lit(bank[k * FILTER_TAPS + t]);
            }
        }
        FilterConv {
            in_c,
            kernels,
            gk: vec![F::zero(); FILTER_TAPS * FILTER_COUNT],
            trainable,
            cache: None,
        }
    }

    /// Random He initialisation (the uninformed ablation arm).
    pub fn random(in_c: usize, rng: &mut ChaCha8Rng, trainable: bool) -> Self {
        FilterConv {
            in_c,
            kernels: he_normal(FILTER_TAPS * FILTER_COUNT, FILTER_TAPS, rng),
            gk: vec![F::zero(); FILTER_TAPS * FILTER_COUNT],
            trainable,
            cache: None,
        }
    }

    pub fn out_c(&self) -> usize {
        self.in_c * FILTER_COUNT
    }

    pub fn forward(&mut self, x: &Feat<F>, train: bool, parallel: bool) -> Result<Feat<F>> {
        debug_assert_eq!(x.c, self.in_c);
        let geom = ConvGeom::bank7();
        let (oh, ow) = geom.out_shape(x.h, x.w)?;
        debug_assert_eq!((oh, ow), (x.h, x.w));
        let p = oh * ow;
        let (in_c, out_c) = (self.in_c, self.out_c());
        let kernels = &self.kernels;
        let mut y = Feat::zeros(x.n, oh, ow, out_c);
        let stride = y.stride();
        par::chunks_mut_indexed(parallel, &mut y.data, stride, |n, chunk| {
            let xs = x.sample(n);
            let mut plane = vec![F::zero(); p];
            let mut cols = vec![F::zero(); p * FILTER_TAPS];
            let mut tmp = vec![F::zero(); p * FILTER_COUNT];
            for ic in 0..in_c {
                for (i, v) in plane.iter_mut().enumerate() {
                    *v = xs[i * in_c + ic];
                }
                im2col(&plane, x.h, x.w, 1, &geom, oh, ow, &mut cols);
                tmp.fill(F::zero());
                matmul_acc(&cols, kernels, &mut tmp, p, FILTER_TAPS, FILTER_COUNT);
                for i in 0..p {
                    chunk[i * out_c + ic * FILTER_COUNT..i * out_c + (ic + 1) * FILTER_COUNT]
                        .copy_from_slice(&tmp[i * FILTER_COUNT..(i + 1) * FILTER_COUNT]);
                }
            }
        });
        if train {
            self.cache = Some(x.clone());
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Feat<F>, parallel: bool) -> Feat<F> {
        let x = self.cache.take().expect("filter backward without cached forward");
        let geom = ConvGeom::bank7();
        let p = x.h * x.w;
        let (in_c, out_c) = (self.in_c, self.out_c());
        let (kernels, trainable) = (&self.kernels, self.trainable);
        let per_sample = par::map_indexed(parallel, x.n, |n| {
            let xs = x.sample(n);
            let dys = dy.sample(n);
            let mut plane = vec![F::zero(); p];
            let mut cols = vec![F::zero(); p * FILTER_TAPS];
            let mut dc = vec![F::zero(); p * FILTER_COUNT];
            let mut da = vec![F::zero(); p * FILTER_TAPS];
            let mut dk = vec![F::zero(); FILTER_TAPS * FILTER_COUNT];
            let mut dxn = vec![F::zero(); x.stride()];
            for ic in 0..in_c {
                for i in 0..p {
                    dc[i * FILTER_COUNT..(i + 1) * FILTER_COUNT].copy_from_slice(
                        &dys[i * out_c + ic * FILTER_COUNT..i * out_c + (ic + 1) * FILTER_COUNT],
                    );
                }
                if trainable {
                    for (i, v) in plane.iter_mut().enumerate() {
                        *v = xs[i * in_c + ic];
                    }
                    im2col(&plane, x.h, x.w, 1, &geom, x.h, x.w, &mut cols);
                    accum_outer(&cols, &dc, &mut dk, p, FILTER_TAPS, FILTER_COUNT);
                }
                matmul_bt(&dc, kernels, &mut da, p, FILTER_TAPS, FILTER_COUNT);
                plane.fill(F::zero());
                col2im_add(&da, x.h, x.w, 1, &geom, x.h, x.w, &mut plane);
                for (i, v) in plane.iter().enumerate() {
                    dxn[i * in_c + ic] = *v;
                }
            }
            (dxn, dk)
        });
        let mut dx = Feat::zeros_like(&x);
        for (n, (dxn, dkn)) in per_sample.into_iter().enumerate() {
            dx.sample_mut(n).copy_from_slice(&dxn);
            if self.trainable {
                for (g, d) in self.gk.iter_mut().zip(&dkn) {
                    *g += *d;
                }
            }
        }
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        f(ParamView {
            name: format!("{prefix}.k"),
            value: &mut self.kernels,
            grad: &mut self.gk,
            trainable: self.trainable,
        });
    }
}

// ---------------------------------------------------------------------------
// BatchNorm2d

#[derive(Clone, Debug)]
struct BnCache<F> {
    xhat: Feat<F>,
    inv_std: Vec<F>,
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<F> {
    pub c: usize,
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
    pub ggamma: Vec<F>,
    pub gbeta: Vec<F>,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    momentum: f64,
    eps: f64,
    cache: Option<BnCache<F>>,
}

impl<F: Real> BatchNorm2d<F> {
    pub fn new(c: usize) -> Self {
        BatchNorm2d {
            c,
            gamma: vec![F::one(); c],
            beta: vec![F::zero(); c],
            ggamma: vec![F::zero(); c],
            gbeta: vec![F::zero(); c],
            running_mean: vec![F::zero(); c],
            running_var: vec![F::one(); c],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    /// Normalise `x` in place. Training mode uses batch statistics (each
    /// channel's sums run over samples/rows/cols in ascending index order,
    /// one task per channel) and updates the running estimates; eval mode
    /// applies the running estimates.
    pub fn forward(&mut self, x: &mut Feat<F>, train: bool, parallel: bool) {
        debug_assert_eq!(x.c, self.c);
        let c = self.c;
        let stride = x.stride();
        if !train {
            let scale: Vec<F> = (0..c)
                .map(|ci| self.gamma[ci] / (self.running_var[ci] + F::lit(self.eps)).sqrt())
                .collect();
            let shift: Vec<F> = (0..c)
                .map(|ci| self.beta[ci] - self.running_mean[ci] * scale[ci])
                .collect();
            par::chunks_mut_indexed(parallel, &mut x.data, stride, |_, chunk| {
                for (i, v) in chunk.iter_mut().enumerate() {
                    let ci = i % c;
                    *v = scale[ci].mul_add(*v, shift[ci]);
                }
            });
            return;
        }

        let m = x.n * x.h * x.w;
        let mf = F::lit(m as f64);
        let data = &x.data;
        let stats = par::map_indexed(parallel, c, |ci| {
            let mut sum = F::zero();
            let mut i = ci;
            while i < data.len() {
                sum += data[i];
                i += c;
            }
            let mean = sum / mf;
            let mut ss = F::zero();
            let mut i = ci;
            while i < data.len() {
                let d = data[i] - mean;
                ss = d.mul_add(d, ss);
                i += c;
            }
            (mean, ss / mf)
        });
        let inv_std: Vec<F> = stats
            .iter()
            .map(|&(_, var)| F::one() / (var + F::lit(self.eps)).sqrt())
            .collect();

        let mut xhat = Feat::zeros_like(x);
        let (gamma, beta) = (&self.gamma, &self.beta);
        let istd = &inv_std;
        let stats_ref = &stats;
        par::zip_chunks_mut(
            parallel,
            &mut x.data,
            stride,
            &mut xhat.data,
            stride,
            |_, xs, xh| {
                for (i, (v, h)) in xs.iter_mut().zip(xh.iter_mut()).enumerate() {
                    let ci = i % c;
                    let n = (*v - stats_ref[ci].0) * istd[ci];
                    *h = n;
                    *v = gamma[ci].mul_add(n, beta[ci]);
                }
            },
        );

        let mom = F::lit(self.momentum);
        let keep = F::one() - mom;
        // Running variance uses the unbiased estimate, as is conventional.
        let bessel = if m > 1 {
            F::lit(m as f64 / (m - 1) as f64)
        } else {
            F::one()
        };
        for ci in 0..c {
            self.running_mean[ci] = keep * self.running_mean[ci] + mom * stats[ci].0;
            self.running_var[ci] = keep * self.running_var[ci] + mom * stats[ci].1 * bessel;
        }
        self.cache = Some(BnCache { xhat, inv_std });
    }

    /// Backward through the training-mode normalisation, in place on `dy`.
    pub fn backward(&mut self, dy: &mut Feat<F>, parallel: bool) {
        let BnCache { xhat, inv_std } =
            self.cache.take().expect("batchnorm backward without cached forward");
        let c = self.c;
        let m = F::lit((dy.n * dy.h * dy.w) as f64);
        let dyd = &dy.data;
        let xhd = &xhat.data;
        let sums = par::map_indexed(parallel, c, |ci| {
            let mut s1 = F::zero();
            let mut s2 = F::zero();
            let mut i = ci;
            while i < dyd.len() {
                s1 += dyd[i];
                s2 = dyd[i].mul_add(xhd[i], s2);
                i += c;
            }
            (s1, s2)
        });
        for ci in 0..c {
            self.gbeta[ci] += sums[ci].0;
            self.ggamma[ci] += sums[ci].1;
        }
        let k: Vec<F> = (0..c).map(|ci| self.gamma[ci] * inv_std[ci]).collect();
        let a: Vec<F> = (0..c).map(|ci| sums[ci].0 / m).collect();
        let b: Vec<F> = (0..c).map(|ci| sums[ci].1 / m).collect();
        let stride = dy.stride();
        par::chunks_mut_indexed(parallel, &mut dy.data, stride, |n, chunk| {
            let xh = xhat.sample(n);
            for (i, v) in chunk.iter_mut().enumerate() {
                let ci = i % c;
                *v = k[ci] * (*v - a[ci] - xh[i] * b[ci]);
            }
        });
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        f(ParamView {
            name: format!("{prefix}.gamma"),
            value: &mut self.gamma,
            grad: &mut self.ggamma,
            trainable: true,
        });
        f(ParamView {
            name: format!("{prefix}.beta"),
            value: &mut self.beta,
            grad: &mut self.gbeta,
            trainable: true,
        });
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut BufferFn<'_, F>) {
        f(BufferView {
            name: format!("{prefix}.running_mean"),
            value: &mut self.running_mean,
        });
        f(BufferView {
            name: format!("{prefix}.running_var"),
            value: &mut self.running_var,
        });
    }
}

// ---------------------------------------------------------------------------
// ReLU

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<Vec<u8>>,
}

impl Relu {
    pub fn new() -> Self {
        Relu { mask: None }
    }

    pub fn forward<F: Real>(&mut self, x: &mut Feat<F>, train: bool, parallel: bool) {
        let stride = x.stride();
        if train {
            let mut mask = vec![0u8; x.data.len()];
            par::zip_chunks_mut(parallel, &mut x.data, stride, &mut mask, stride, |_, xs, ms| {
                for (v, m) in xs.iter_mut().zip(ms.iter_mut()) {
                    if *v > F::zero() {
                        *m = 1;
                    } else {
                        *v = F::zero();
                    }
                }
            });
            self.mask = Some(mask);
        } else {
            par::chunks_mut_indexed(parallel, &mut x.data, stride, |_, xs| {
                for v in xs.iter_mut() {
                    if *v < F::zero() {
                        *v = F::zero();
                    }
                }
            });
        }
    }

    pub fn backward<F: Real>(&mut self, dy: &mut Feat<F>, parallel: bool) {
        let mask = self.mask.take().expect("relu backward without cached forward");
        let stride = dy.stride();
        par::chunks_mut_indexed(parallel, &mut dy.data, stride, |n, chunk| {
            let ms = &mask[n * stride..n * stride + chunk.len()];
            for (v, &m) in chunk.iter_mut().zip(ms) {
                if m == 0 {
                    *v = F::zero();
                }
            }
        });
    }
}

// ---------------------------------------------------------------------------
// Global average pooling

pub fn gap_forward<F: Real>(x: &Feat<F>, parallel: bool) -> Feat<F> {
    let area = F::lit((x.h * x.w) as f64);
    let c = x.c;
    let mut y = Feat::zeros(x.n, 1, 1, c);
    par::chunks_mut_indexed(parallel, &mut y.data, c, |n, chunk| {
        let xs = x.sample(n);
        for (ci, out) in chunk.iter_mut().enumerate() {
            let mut sum = F::zero();
            let mut i = ci;
            while i < xs.len() {
                sum += xs[i];
                i += c;
            }
            *out = sum / area;
        }
    });
    y
}

pub fn gap_backward<F: Real>(dy: &Feat<F>, h: usize, w: usize, parallel: bool) -> Feat<F> {
    let scale = F::one() / F::lit((h * w) as f64);
    let c = dy.c;
    let mut dx = Feat::zeros(dy.n, h, w, c);
    let stride = dx.stride();
    par::chunks_mut_indexed(parallel, &mut dx.data, stride, |n, chunk| {
        let g = dy.sample(n);
        for (i, v) in chunk.iter_mut().enumerate() {
            *v = g[i % c] * scale;
        }
    });
    dx
}

// ---------------------------------------------------------------------------
// Linear

#[derive(Clone, Debug)]
pub struct Linear<F> {
    pub in_f: usize,
    pub out_f: usize,
    /// `in_f × out_f`, input-feature-major.
    pub w: Vec<F>,
    pub b: Vec<F>,
    pub gw: Vec<F>,
    pub gb: Vec<F>,
    cache: Option<Feat<F>>,
}

impl<F: Real> Linear<F> {
    pub fn new(in_f: usize, out_f: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_f as f64).sqrt();
        let mut draw = |n: usize| -> Vec<F> {
            (0..n).map(|_| F::lit(rng.random_range(-bound..bound))).collect()
        };
        let w = draw(in_f * out_f);
        let b = draw(out_f);
        Linear {
            in_f,
            out_f,
            w,
            b,
            gw: vec![F::zero(); in_f * out_f],
            gb: vec![F::zero(); out_f],
            cache: None,
        }
    }

    /// `x` is `(N, 1, 1, in_f)`; returns `(N, 1, 1, out_f)`.
    pub fn forward(&mut self, x: &Feat<F>, train: bool, parallel: bool) -> Feat<F> {
        debug_assert_eq!(x.c, self.in_f);
        debug_assert_eq!((x.h, x.w), (1, 1));
        let mut y = Feat::zeros(x.n, 1, 1, self.out_f);
        let (wmat, bias, in_f, out_f) = (&self.w, &self.b, self.in_f, self.out_f);
        par::chunks_mut_indexed(parallel, &mut y.data, out_f, |n, row| {
            row.copy_from_slice(bias);
            matmul_acc(x.sample(n), wmat, row, 1, in_f, out_f);
        });
        if train {
            self.cache = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Feat<F>, parallel: bool) -> Feat<F> {
        let x = self.cache.take().expect("linear backward without cached forward");
        let (wmat, in_f, out_f) = (&self.w, self.in_f, self.out_f);
        let per_sample = par::map_indexed(parallel, x.n, |n| {
            let mut dxn = vec![F::zero(); in_f];
            matmul_bt(dy.sample(n), wmat, &mut dxn, 1, in_f, out_f);
            let mut dwn = vec![F::zero(); in_f * out_f];
            accum_outer(x.sample(n), dy.sample(n), &mut dwn, 1, in_f, out_f);
            (dxn, dwn)
        });
        let mut dx = Feat::zeros(x.n, 1, 1, in_f);
        for (n, (dxn, dwn)) in per_sample.into_iter().enumerate() {
            dx.sample_mut(n).copy_from_slice(&dxn);
            for (g, d) in self.gw.iter_mut().zip(&dwn) {
                *g += *d;
            }
            for (g, d) in self.gb.iter_mut().zip(dy.sample(n)) {
                *g += *d;
            }
        }
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        f(ParamView {
            name: format!("{prefix}.w"),
            value: &mut self.w,
            grad: &mut self.gw,
            trainable: true,
        });
        f(ParamView {
            name: format!("{prefix}.b"),
            value: &mut self.b,
            grad: &mut self.gb,
            trainable: true,
        });
    }
}

// ---------------------------------------------------------------------------
// BasicBlock

/// Two 3×3 convs with batch norm and a residual connection. Downsampling
/// blocks use a stride-2 *valid* first conv (35→17→8) and a 1×1 stride-2
/// projection shortcut sampled at the matching window centers.
#[derive(Clone, Debug)]
pub struct BasicBlock<F> {
    pub conv1: Conv2d<F>,
    pub bn1: BatchNorm2d<F>,
    relu1: Relu,
    pub conv2: Conv2d<F>,
    pub bn2: BatchNorm2d<F>,
    relu2: Relu,
    pub proj: Option<(Conv2d<F>, BatchNorm2d<F>)>,
}

impl<F: Real> BasicBlock<F> {
    pub fn new(in_c: usize, out_c: usize, downsample: bool, rng: &mut ChaCha8Rng) -> Self {
        let geom1 = if downsample { ConvGeom::down3() } else { ConvGeom::same3() };
        let conv1 = Conv2d::new(in_c, out_c, geom1, rng);
        let conv2 = Conv2d::new(out_c, out_c, ConvGeom::same3(), rng);
        let proj = (downsample || in_c != out_c).then(|| {
            let geom = if downsample {
                ConvGeom::proj1()
            } else {
                ConvGeom {
                    kh: 1,
                    kw: 1,
                    stride: 1,
                    pad: 0,
                    offset: 0,
                }
            };
            (Conv2d::new(in_c, out_c, geom, rng), BatchNorm2d::new(out_c))
        });
        BasicBlock {
            conv1,
            bn1: BatchNorm2d::new(out_c),
            relu1: Relu::new(),
            conv2,
            bn2: BatchNorm2d::new(out_c),
            relu2: Relu::new(),
            proj,
        }
    }

    pub fn forward(&mut self, x: &Feat<F>, train: bool, parallel: bool) -> Result<Feat<F>> {
        let shortcut = match &mut self.proj {
            Some((pc, pb)) => {
                let mut s = pc.forward(x, train, parallel)?;
                pb.forward(&mut s, train, parallel);
                s
            }
            None => x.clone(),
        };
        let mut m = self.conv1.forward(x, train, parallel)?;
        self.bn1.forward(&mut m, train, parallel);
        self.relu1.forward(&mut m, train, parallel);
        let mut out = self.conv2.forward(&m, train, parallel)?;
        drop(m);
        self.bn2.forward(&mut out, train, parallel);
        add_assign_feat(&mut out, &shortcut, parallel);
        self.relu2.forward(&mut out, train, parallel);
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Feat<F>, parallel: bool) -> Feat<F> {
        let mut d = dy.clone();
        self.relu2.backward(&mut d, parallel);
        let mut dshort = d.clone();
        self.bn2.backward(&mut d, parallel);
        let mut dm = self.conv2.backward(&d, parallel);
        drop(d);
        self.relu1.backward(&mut dm, parallel);
        self.bn1.backward(&mut dm, parallel);
        let mut dx = self.conv1.backward(&dm, parallel);
        match &mut self.proj {
            Some((pc, pb)) => {
                pb.backward(&mut dshort, parallel);
                let dxp = pc.backward(&dshort, parallel);
                add_assign_feat(&mut dx, &dxp, parallel);
            }
            None => add_assign_feat(&mut dx, &dshort, parallel),
        }
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.bn1.visit(&format!("{prefix}.bn1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        self.bn2.visit(&format!("{prefix}.bn2"), f);
        if let Some((pc, pb)) = &mut self.proj {
            pc.visit(&format!("{prefix}.proj.conv"), f);
            pb.visit(&format!("{prefix}.proj.bn"), f);
        }
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut BufferFn<'_, F>) {
        self.bn1.visit_buffers(&format!("{prefix}.bn1"), f);
        self.bn2.visit_buffers(&format!("{prefix}.bn2"), f);
        if let Some((_, pb)) = &mut self.proj {
            pb.visit_buffers(&format!("{prefix}.proj.bn"), f);
        }
    }
}
