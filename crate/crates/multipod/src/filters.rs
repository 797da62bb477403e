//! Oriented directional-derivative filter bank.
//!
//! Eight 7×7 kernels at orientations `k·22.5°`. Kernel k is the directional
//! derivative of an isotropic Gaussian along orientation θ_k, mean-corrected
//! to zero DC and scaled to unit L2 norm. Coefficients are kept in `f64`; the
//! zero-sum property holds to ≪1e-10 and a constant image produces an
//! (interior) all-zero response. The bank doubles as the informed
//! initialisation of each pod's trainable front-end convolution.

use crate::error::{Error, Result};
use crate::pipeline::ImageBuffer;

pub const ORIENTATIONS: usize = 8;
pub const KERNEL_SIZE: usize = 7;
pub const KERNEL_RADIUS: isize = (KERNEL_SIZE as isize - 1) / 2;
const KERNEL_AREA: usize = KERNEL_SIZE * KERNEL_SIZE;

#[derive(Clone, Debug)]
pub struct DirectionalFilterBank {
    sigma: f64,
    trainable: bool,
    /// `ORIENTATIONS × KERNEL_SIZE × KERNEL_SIZE`, orientation-major,
    /// then row (y), then column (x).
    kernels: Vec<f64>,
}

/// Orientation of bank index k, in degrees from the x axis.
pub fn orientation_deg(k: usize) -> f64 {
    k as f64 * 180.0 / ORIENTATIONS as f64
}

/// Build the bank. `trainable` marks whether a model embedding these kernels
/// updates them during training (the kernels themselves are identical).
pub fn build_bank(sigma: f64, trainable: bool) -> Result<DirectionalFilterBank> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::config(format!("filter sigma must be positive, got {sigma}")));
    }
    let mut kernels = vec![0.0f64; ORIENTATIONS * KERNEL_AREA];
    for k in 0..ORIENTATIONS {
        let theta = orientation_deg(k).to_radians();
        let (sin, cos) = theta.sin_cos();
        let kern = &mut kernels[k * KERNEL_AREA..(k + 1) * KERNEL_AREA];
        for ky in 0..KERNEL_SIZE {
            let y = ky as isize as f64 - KERNEL_RADIUS as f64;
            for kx in 0..KERNEL_SIZE {
                let x = kx as isize as f64 - KERNEL_RADIUS as f64;
                let g = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
                // d/dθ of the Gaussian: odd along the orientation axis.
                kern[ky * KERNEL_SIZE + kx] = -(x * cos + y * sin) / (sigma * sigma) * g;
            }
        }
        let mean = kern.iter().sum::<f64>() / KERNEL_AREA as f64;
        for v in kern.iter_mut() {
            *v -= mean;
        }
        let norm = kern.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in kern.iter_mut() {
            *v /= norm;
        }
    }
    Ok(DirectionalFilterBank {
        sigma,
        trainable,
        kernels,
    })
}

impl DirectionalFilterBank {
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn kernel(&self, k: usize) -> &[f64] {
        &self.kernels[k * KERNEL_AREA..(k + 1) * KERNEL_AREA]
    }

    pub fn kernels(&self) -> &[f64] {
        &self.kernels
    }
}

/// Convolve every input channel with every kernel: `H×W×C` →
/// `H×W×(8·C)`, output channel `ic·8 + k` (input-channel-major). Same-size
/// output via 3-px zero padding; accumulation in `f64`.
pub fn apply_bank(img: &ImageBuffer, bank: &DirectionalFilterBank) -> ImageBuffer {
    let (h, w, c) = (img.h(), img.w(), img.channels());
    let mut out = ImageBuffer::new(h, w, c * ORIENTATIONS);
    for ic in 0..c {
        for k in 0..ORIENTATIONS {
            let kern = bank.kernel(k);
            let oc = ic * ORIENTATIONS + k;
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0f64;
                    for ky in 0..KERNEL_SIZE {
                        let sy = y as isize + ky as isize - KERNEL_RADIUS;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..KERNEL_SIZE {
                            let sx = x as isize + kx as isize - KERNEL_RADIUS;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            acc += kern[ky * KERNEL_SIZE + kx]
                                * img.get(sy as usize, sx as usize, ic) as f64;
                        }
                    }
                    out.set(y, x, oc, acc as f32);
                }
            }
        }
    }
    out
}

/// Index of the orientation with the largest mean absolute response over the
/// image interior (borders excluded so zero padding cannot bias the vote).
/// Ties resolve to the lower index.
pub fn dominant_orientation(bank: &DirectionalFilterBank, img: &ImageBuffer) -> usize {
    let resp = apply_bank(img, bank);
    let (h, w, c) = (img.h(), img.w(), img.channels());
    let m = KERNEL_RADIUS as usize;
    let mut best = (0usize, f64::NEG_INFINITY);
    for k in 0..ORIENTATIONS {
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for ic in 0..c {
            for y in m..h.saturating_sub(m) {
                for x in m..w.saturating_sub(m) {
                    acc += resp.get(y, x, ic * ORIENTATIONS + k).abs() as f64;
                    count += 1;
                }
            }
        }
        let mean = if count == 0 { 0.0 } else { acc / count as f64 };
        if mean > best.1 {
            best = (k, mean);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Step edge whose intensity gradient points along `theta_deg`.
    fn edge_image(theta_deg: f64) -> ImageBuffer {
        let rad = theta_deg.to_radians();
        let (sin, cos) = rad.sin_cos();
        let c = 17.0;
        ImageBuffer::from_fn(35, 35, 1, |y, x, _| {
            let d = (x as f64 - c) * cos + (y as f64 - c) * sin;
            if d >= 0.0 {
                255.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn bank_has_eight_unit_norm_zero_sum_kernels() {
        for sigma in [1.0, 1.5, 2.5] {
            let bank = build_bank(sigma, true).unwrap();
            for k in 0..ORIENTATIONS {
                let kern = bank.kernel(k);
                assert_eq!(kern.len(), 49);
                let sum: f64 = kern.iter().sum();
                assert!(sum.abs() < 1e-10, "kernel {k} σ={sigma} sums to {sum}");
                let norm: f64 = kern.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn horizontal_kernel_is_odd_and_vertical_is_its_transpose() {
        let bank = build_bank(1.5, true).unwrap();
        let k0 = bank.kernel(0);
        let k4 = bank.kernel(4);
        for y in 0..KERNEL_SIZE {
            for x in 0..KERNEL_SIZE {
                // θ=0: antisymmetric under horizontal flip.
                assert_abs_diff_eq!(
                    k0[y * KERNEL_SIZE + x],
                    -k0[y * KERNEL_SIZE + (KERNEL_SIZE - 1 - x)],
                    epsilon = 1e-12
                );
                // θ=90° equals the transpose of θ=0.
                assert_abs_diff_eq!(k4[y * KERNEL_SIZE + x], k0[x * KERNEL_SIZE + y], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rejects_non_positive_sigma() {
        assert!(build_bank(0.0, true).is_err());
        assert!(build_bank(-1.5, false).is_err());
    }

    #[test]
    fn output_shape_multiplies_channels() {
        let bank = build_bank(1.5, true).unwrap();
        let single = apply_bank(&ImageBuffer::constant(35, 35, 1, 1.0), &bank);
        assert_eq!(
            (single.h(), single.w(), single.channels()),
            (35, 35, ORIENTATIONS)
        );
        let triple = apply_bank(&ImageBuffer::constant(35, 35, 3, 1.0), &bank);
        assert_eq!(triple.channels(), 3 * ORIENTATIONS);
    }

    #[test]
    fn constant_image_response_vanishes_in_the_interior() {
        let bank = build_bank(1.5, true).unwrap();
        let resp = apply_bank(&ImageBuffer::constant(35, 35, 1, 128.0), &bank);
        let m = KERNEL_RADIUS as usize;
        let mut worst = 0.0f32;
        for k in 0..ORIENTATIONS {
            for y in m..35 - m {
                for x in m..35 - m {
                    worst = worst.max(resp.get(y, x, k).abs());
                }
            }
        }
        assert!(worst < 1e-10, "interior response to a constant: {worst}");
    }

    #[test]
    fn step_edges_select_their_orientation_channel() {
        let bank = build_bank(1.5, true).unwrap();
        assert_eq!(dominant_orientation(&bank, &edge_image(0.0)), 0);
        assert_eq!(dominant_orientation(&bank, &edge_image(90.0)), 4);
        assert_eq!(dominant_orientation(&bank, &edge_image(22.5)), 1);
    }

    #[test]
    fn selectivity_survives_five_degree_jitter() {
        let bank = build_bank(1.5, true).unwrap();
        for k in 0..ORIENTATIONS {
            for jitter in [-5.0, 0.0, 5.0] {
                let img = edge_image(orientation_deg(k) + jitter);
                assert_eq!(
                    dominant_orientation(&bank, &img),
                    k,
                    "orientation {k} jitter {jitter}"
                );
            }
        }
    }

    #[test]
    fn response_is_linear_in_the_image() {
        let bank = build_bank(1.5, true).unwrap();
        let a = ImageBuffer::from_fn(20, 20, 1, |y, x, _| ((y * 13 + x * 7) % 256) as f32);
        let b = ImageBuffer::from_fn(20, 20, 1, |y, x, _| ((y * 5 + x * 29) % 256) as f32);
        let combo = ImageBuffer::from_fn(20, 20, 1, |y, x, _| {
            0.3 * a.get(y, x, 0) + 0.6 * b.get(y, x, 0)
        });
        let ra = apply_bank(&a, &bank);
        let rb = apply_bank(&b, &bank);
        let rc = apply_bank(&combo, &bank);
        for (i, &v) in rc.data().iter().enumerate() {
            let expect = 0.3 * ra.data()[i] + 0.6 * rb.data()[i];
            assert_abs_diff_eq!(v, expect, epsilon = 1e-2);
        }
    }
}
