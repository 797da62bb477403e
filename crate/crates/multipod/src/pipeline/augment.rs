//! Training-time augmentation: whole-image policies over the ROI crop and the
//! per-patch rotation + intensity jitter.
//!
//! All draws come from the caller's RNG in a fixed documented order, so a
//! record's augmentation depends only on its `(seed, epoch, index)` stream.
//! Every entry point bumps [`aug_event_count`]; the evaluation path never
//! touches this module, which the tests assert through that counter.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma};

use super::{autocontrast, rotate, rotate_patch, scale_clamp, translate, ImageBuffer, PatchSet};

/// Counts augmentation applications (policy or patch set). Test instrumentation.
static AUG_EVENTS: AtomicU64 = AtomicU64::new(0);

pub fn aug_event_count() -> u64 {
    AUG_EVENTS.load(Ordering::Relaxed)
}

fn bump() {
    AUG_EVENTS.fetch_add(1, Ordering::Relaxed);
}

/// Patch rotation is drawn uniformly from ±this many degrees.
pub const PATCH_ROT_MAX_DEG: f64 = 5.0;
/// Patch intensity jitter factor range.
pub const PATCH_JITTER: (f32, f32) = (0.8, 1.2);

/// Whole-image augmentation policy applied to the ROI crop before patch
/// extraction. `None` is the evaluation behaviour.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum AugPolicy {
    None,
    /// Random integer translation followed by min–max autocontrast.
    TranslateAutoContrast { max_dx: i64, max_dy: i64 },
    /// A fixed number of ops sampled from {translate, rotate, autocontrast,
    /// jitter} at a shared magnitude in `[0, 1]`.
    RandAugmentLite { ops: usize, magnitude: f64 },
    /// Convex mix of short augmentation chains with the original image;
    /// Dirichlet(alpha) chain weights, Beta(alpha, alpha) mixing.
    AugMixLite { chains: usize, alpha: f64 },
}

impl AugPolicy {
    pub fn translate_autocontrast() -> Self {
        AugPolicy::TranslateAutoContrast { max_dx: 3, max_dy: 3 }
    }

    pub fn randaugment() -> Self {
        AugPolicy::RandAugmentLite { ops: 2, magnitude: 0.5 }
    }

    pub fn augmix() -> Self {
        AugPolicy::AugMixLite { chains: 3, alpha: 1.0 }
    }
}

/// Integer translation with both offsets drawn uniformly from ±max (dx first).
pub fn random_translate(img: &ImageBuffer, rng: &mut impl Rng, max_dx: i64, max_dy: i64) -> ImageBuffer {
    let dx = if max_dx > 0 { rng.random_range(-max_dx..=max_dx) } else { 0 };
    let dy = if max_dy > 0 { rng.random_range(-max_dy..=max_dy) } else { 0 };
    translate(img, dx, dy)
}

/// One op of the RandAugment/AugMix op set at magnitude `m ∈ [0, 1]`.
/// Ops: 0 translate (±6m px), 1 rotate (±10m°), 2 autocontrast, 3 jitter (1±0.4m).
fn apply_op(img: &ImageBuffer, rng: &mut impl Rng, op: usize, m: f64) -> ImageBuffer {
    match op {
        0 => {
            let max = (6.0 * m).round() as i64;
            random_translate(img, rng, max, max)
        }
        1 => {
            let lim = 10.0 * m;
            let angle = rng.random_range(-lim..=lim);
            rotate(img, angle)
        }
        2 => autocontrast(img),
        3 => {
            let half = 0.4 * m as f32;
            let factor = rng.random_range(1.0 - half..=1.0 + half);
            scale_clamp(img, factor)
        }
        _ => unreachable!("op index out of range"),
    }
}

/// Apply a policy to a ROI image. Draw order is fixed per variant:
/// translate+AC draws (dx, dy); RandAugment draws (op, params) per op;
/// AugMix draws weights, mix coefficient, then per chain (depth, ops).
pub fn apply_policy(policy: &AugPolicy, img: &ImageBuffer, rng: &mut impl Rng) -> ImageBuffer {
    match policy {
        AugPolicy::None => img.clone(),
        AugPolicy::TranslateAutoContrast { max_dx, max_dy } => {
            bump();
            autocontrast(&random_translate(img, rng, *max_dx, *max_dy))
        }
        AugPolicy::RandAugmentLite { ops, magnitude } => {
            bump();
            let mut out = img.clone();
            for _ in 0..*ops {
                let op = rng.random_range(0..4);
                out = apply_op(&out, rng, op, *magnitude);
            }
            out
        }
        AugPolicy::AugMixLite { chains, alpha } => {
            bump();
            let k = (*chains).max(1);
            // Symmetric Dirichlet(α) weights via normalised Gamma(α, 1)
            // draws, which works for a runtime chain count.
            let weights: Vec<f64> = if k == 1 {
                vec![1.0]
            } else {
                let gamma = Gamma::new(*alpha, 1.0).expect("valid Dirichlet parameters");
                let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
                let total: f64 = draws.iter().sum();
                if total > 0.0 {
                    for d in draws.iter_mut() {
                        *d /= total;
                    }
                } else {
                    draws.fill(1.0 / k as f64);
                }
                draws
            };
            let mix = Beta::new(*alpha, *alpha).expect("valid Beta parameters").sample(rng);
            let mut blended = vec![0.0f64; img.data().len()];
            for &w in weights.iter().take(k) {
                let depth = rng.random_range(1..=2usize);
                let mut chain = img.clone();
                for _ in 0..depth {
                    let op = rng.random_range(0..4);
                    chain = apply_op(&chain, rng, op, 0.5);
                }
                for (acc, &v) in blended.iter_mut().zip(chain.data()) {
                    *acc += w * v as f64;
                }
            }
            let mut out = img.clone();
            for (o, (&orig, &b)) in out
                .data_mut()
                .iter_mut()
                .zip(img.data().iter().zip(blended.iter()))
                .map(|(o, p)| (o, p))
            {
                *o = ((1.0 - mix) * orig as f64 + mix * b) as f32;
            }
            out
        }
    }
}

/// Sampled per-patch parameters: rotation angles (degrees) and intensity
/// factors, drawn per patch in order (angle₀, factor₀, angle₁, …).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchAugParams {
    pub angles: [f64; 3],
    pub factors: [f32; 3],
}

pub fn sample_patch_aug(rng: &mut impl Rng) -> PatchAugParams {
    let mut angles = [0.0; 3];
    let mut factors = [1.0; 3];
    for i in 0..3 {
        angles[i] = rng.random_range(-PATCH_ROT_MAX_DEG..=PATCH_ROT_MAX_DEG);
        factors[i] = rng.random_range(PATCH_JITTER.0..=PATCH_JITTER.1);
    }
    PatchAugParams { angles, factors }
}

/// Deterministic core of the patch augmentation: rotate then jitter each patch.
pub fn apply_patch_aug(ps: &PatchSet, params: &PatchAugParams) -> PatchSet {
    let aug = |i: usize| {
        let rotated = rotate_patch(&ps.patches[i], params.angles[i]);
        scale_clamp(&rotated, params.factors[i])
    };
    PatchSet {
        patches: [aug(0), aug(1), aug(2)],
    }
}

/// Training-side patch augmentation: fresh draws per patch per call.
pub fn augment_patchset(ps: &PatchSet, rng: &mut impl Rng) -> PatchSet {
    bump();
    apply_patch_aug(ps, &sample_patch_aug(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{PATCH, ROI_H, ROI_W};
    use crate::rng;

    fn probe_image() -> ImageBuffer {
        ImageBuffer::from_fn(ROI_H, ROI_W, 1, |y, x, _| ((y * 37 + x * 11) % 256) as f32)
    }

    fn probe_patchset() -> PatchSet {
        crate::pipeline::extract_patches(&probe_image()).unwrap()
    }

    #[test]
    fn none_policy_is_identity_and_uncounted() {
        let img = probe_image();
        let before = aug_event_count();
        let out = apply_policy(&AugPolicy::None, &img, &mut rng::stream(1));
        assert_eq!(out, img);
        assert_eq!(aug_event_count(), before);
    }

    #[test]
    fn policies_are_deterministic_given_the_stream() {
        let img = probe_image();
        for policy in [
            AugPolicy::translate_autocontrast(),
            AugPolicy::randaugment(),
            AugPolicy::augmix(),
        ] {
            let a = apply_policy(&policy, &img, &mut rng::stream(99));
            let b = apply_policy(&policy, &img, &mut rng::stream(99));
            assert_eq!(a, b, "{policy:?} must be reproducible");
        }
    }

    #[test]
    fn policy_outputs_stay_in_intensity_range() {
        let img = probe_image();
        for policy in [
            AugPolicy::translate_autocontrast(),
            AugPolicy::randaugment(),
            AugPolicy::augmix(),
        ] {
            for seed in 0..50 {
                let out = apply_policy(&policy, &img, &mut rng::stream(seed));
                let lo = out.data().iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = out.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                assert!(lo >= 0.0 && hi <= 255.0, "{policy:?} left range: [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn translate_autocontrast_full_range_zero_shift_is_identity() {
        // An image already spanning [0, 255] is a fixed point when the shift is zero.
        let mut img = probe_image();
        img.set(0, 0, 0, 0.0);
        img.set(0, 1, 0, 255.0);
        let policy = AugPolicy::TranslateAutoContrast { max_dx: 0, max_dy: 0 };
        let out = apply_policy(&policy, &img, &mut rng::stream(5));
        assert_eq!(out, img);
    }

    #[test]
    fn patch_aug_with_identity_params_is_identity() {
        let ps = probe_patchset();
        let params = PatchAugParams {
            angles: [0.0; 3],
            factors: [1.0; 3],
        };
        let out = apply_patch_aug(&ps, &params);
        for i in 0..3 {
            assert_eq!(out.patches[i], ps.patches[i]);
        }
    }

    #[test]
    fn patch_aug_draws_fresh_parameters_per_patch_and_call() {
        let mut r = rng::stream(11);
        let p1 = sample_patch_aug(&mut r);
        let p2 = sample_patch_aug(&mut r);
        assert_ne!(p1, p2, "consecutive calls must draw fresh parameters");
        assert!(p1.angles[0] != p1.angles[1] || p1.angles[1] != p1.angles[2]);
    }

    #[test]
    fn patch_aug_sampling_matches_declared_distribution() {
        let mut r = rng::stream(3);
        let n = 10_000;
        let mut angle_sum = 0.0;
        let mut factor_sum = 0.0;
        for _ in 0..n {
            let p = sample_patch_aug(&mut r);
            for i in 0..3 {
                assert!(p.angles[i].abs() <= PATCH_ROT_MAX_DEG);
                assert!(p.factors[i] >= PATCH_JITTER.0 && p.factors[i] <= PATCH_JITTER.1);
                angle_sum += p.angles[i];
                factor_sum += p.factors[i] as f64;
            }
        }
        let angle_mean = angle_sum / (3 * n) as f64;
        let factor_mean = factor_sum / (3 * n) as f64;
        assert!(angle_mean.abs() < 0.2, "rotation mean {angle_mean}");
        assert!((factor_mean - 1.0).abs() < 0.01, "factor mean {factor_mean}");
    }

    #[test]
    fn augment_patchset_bumps_instrumentation() {
        let ps = probe_patchset();
        let before = aug_event_count();
        let _ = augment_patchset(&ps, &mut rng::stream(5));
        let _ = apply_policy(&AugPolicy::translate_autocontrast(), &probe_image(), &mut rng::stream(5));
        assert_eq!(aug_event_count(), before + 2);
    }

    #[test]
    fn augmented_patches_keep_dimensions() {
        let ps = probe_patchset();
        let out = augment_patchset(&ps, &mut rng::stream(21));
        for p in &out.patches {
            assert_eq!((p.h(), p.w(), p.channels()), (PATCH, PATCH, 1));
        }
    }
}
