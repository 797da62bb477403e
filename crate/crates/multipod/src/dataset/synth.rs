//! Synthetic cervical-vertebrae images for tests, benchmarks, and the
//! acceptance runs.
//!
//! Each image is a vertical stack of three stylised vertebral bodies on a
//! darker background. Two properties are tied monotonically to the stage
//! index and nothing else: the depth of the lower-border concavity
//! (`1 + stage` px) and the body height (`9 + 2·stage` px, i.e. the aspect
//! ratio at fixed width). Per-image jitter (global shifts, intensity levels,
//! pixel noise) is drawn from a stream keyed by `(seed, image index)`, so
//! generation is reproducible byte-for-byte and parallelisation over images
//! is race-free.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{Manifest, Roi, Sex, StageLabel, SubjectRecord, STAGE_COUNT};
use crate::error::{Error, Result};
use crate::par;
use crate::pipeline::{save_png, ImageBuffer, ROI_H, ROI_W};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub per_stage: usize,
    pub seed: u64,
    /// Standard deviation of additive Gaussian pixel noise (intensity units).
    pub noise: f64,
    /// Emit larger source images with a stored ROI instead of ready crops.
    pub with_roi: bool,
    /// Age model: `base + per_stage·stage + U[0, jitter]` years.
    pub age_base: f64,
    pub age_per_stage: f64,
    pub age_jitter: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            per_stage: 100,
            seed: 0,
            noise: 8.0,
            with_roi: false,
            age_base: 6.0,
            age_per_stage: 2.0,
            age_jitter: 1.0,
        }
    }
}

/// Stage-determined geometry, in ROI-scale pixels.
#[derive(Clone, Copy, Debug)]
pub struct StageGeometry {
    pub concavity_depth: f64,
    pub body_height: f64,
    pub body_width: f64,
}

impl StageGeometry {
    pub fn for_stage(stage: StageLabel) -> StageGeometry {
        let s = stage.index() as f64;
        StageGeometry {
            concavity_depth: 1.0 + s,
            body_height: 9.0 + 2.0 * s,
            body_width: 24.0,
        }
    }
}

/// ROI-scale row centres of the three bodies (one per patch window).
const BODY_CENTERS: [f64; 3] = [17.0, 38.0, 59.0];
const BODY_CENTER_COL: f64 = 17.0;

/// Canvas and placement for `with_roi` mode: the three-body column is drawn
/// at 2× scale and pasted at a jittered offset inside a larger source image.
const ROI_MODE_SCALE: f64 = 2.0;
const ROI_MODE_CANVAS: (usize, usize) = (200, 100);

struct ImageParams {
    row_shift: f64,
    col_shift: f64,
    body_intensity: f64,
    background: f64,
    age: f64,
    roi_offset: (usize, usize),
}

fn draw_params(cfg: &SyntheticConfig, stage: StageLabel, r: &mut impl Rng) -> ImageParams {
    let row_shift = r.random_range(-2..=2i64) as f64;
    let col_shift = r.random_range(-1..=1i64) as f64;
    let body_intensity = r.random_range(190.0..=225.0);
    let background = r.random_range(30.0..=50.0);
    let age_raw = cfg.age_base
        + cfg.age_per_stage * stage.index() as f64
        + if cfg.age_jitter > 0.0 { r.random_range(0.0..=cfg.age_jitter) } else { 0.0 };
    let age = (age_raw * 100.0).round() / 100.0;
    let roi_offset = if cfg.with_roi {
        let oy = r.random_range(5..=41usize);
        let ox = r.random_range(5..=25usize);
        (oy, ox)
    } else {
        (0, 0)
    };
    ImageParams {
        row_shift,
        col_shift,
        body_intensity,
        background,
        age,
        roi_offset,
    }
}

/// Rasterise the three-body column at `scale` into `(ROI_H·scale, ROI_W·scale)`.
fn render_content(stage: StageLabel, scale: f64, p: &ImageParams) -> ImageBuffer {
    let geom = StageGeometry::for_stage(stage);
    let h = (ROI_H as f64 * scale) as usize;
    let w = (ROI_W as f64 * scale) as usize;
    let half_w = geom.body_width / 2.0 * scale;
    let cx = (BODY_CENTER_COL + p.col_shift) * scale;
    let depth = geom.concavity_depth * scale;
    let half_h = geom.body_height / 2.0 * scale;

    ImageBuffer::from_fn(h, w, 1, |y, x, _| {
        let yf = y as f64;
        let xf = x as f64;
        for &c in &BODY_CENTERS {
            let cy = (c + p.row_shift) * scale;
            let u = (xf - cx) / half_w;
            if u.abs() > 1.0 {
                continue;
            }
            let top = cy - half_h;
            // Lower border dips upward toward the centre: the concavity.
            let bottom = cy + half_h - depth * (1.0 - u * u).max(0.0);
            if yf >= top && yf <= bottom {
                return p.body_intensity as f32;
            }
        }
        p.background as f32
    })
}

fn add_noise(img: &mut ImageBuffer, noise: f64, r: &mut impl Rng) {
    if noise <= 0.0 {
        return;
    }
    let dist = Normal::new(0.0, noise).expect("positive noise std");
    for v in img.data_mut() {
        *v = (*v + dist.sample(r) as f32).clamp(0.0, 255.0);
    }
}

fn render_image(cfg: &SyntheticConfig, stage: StageLabel, index: usize) -> (ImageBuffer, ImageParams) {
    let mut r = rng::image_stream(cfg.seed, index);
    let p = draw_params(cfg, stage, &mut r);
    let mut img = if cfg.with_roi {
        let content = render_content(stage, ROI_MODE_SCALE, &p);
        let (ch, cw) = (ROI_MODE_CANVAS.0, ROI_MODE_CANVAS.1);
        let (oy, ox) = p.roi_offset;
        let mut canvas = ImageBuffer::constant(ch, cw, 1, p.background as f32);
        for y in 0..content.h() {
            for x in 0..content.w() {
                canvas.set(oy + y, ox + x, 0, content.get(y, x, 0));
            }
        }
        canvas
    } else {
        render_content(stage, 1.0, &p)
    };
    add_noise(&mut img, cfg.noise, &mut r);
    (img, p)
}

/// Generate `6 × per_stage` images plus `manifest.csv` under `out_dir`.
/// Rerunning with the same config reproduces every byte.
pub fn generate_synthetic(cfg: &SyntheticConfig, out_dir: &Path, parallel: bool) -> Result<Manifest> {
    if cfg.per_stage == 0 {
        return Err(Error::config("per_stage must be positive"));
    }
    if !(cfg.noise >= 0.0) || !(cfg.age_jitter >= 0.0) {
        return Err(Error::config("noise and age jitter must be non-negative"));
    }
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|source| Error::Write {
        path: images_dir.clone(),
        source,
    })?;

    let total = STAGE_COUNT * cfg.per_stage;
    let results = par::map_indexed(parallel, total, |index| {
        let stage = StageLabel::from_index(index / cfg.per_stage).expect("index in range");
        let (img, p) = render_image(cfg, stage, index);
        let rel = format!("images/{}_{:04}.png", stage.token().to_lowercase(), index % cfg.per_stage);
        save_png(&img, &out_dir.join(&rel))?;
        let roi = cfg.with_roi.then(|| Roi {
            x: p.roi_offset.1 as u32,
            y: p.roi_offset.0 as u32,
            w: (ROI_W as f64 * ROI_MODE_SCALE) as u32,
            h: (ROI_H as f64 * ROI_MODE_SCALE) as u32,
        });
        Ok(SubjectRecord {
            image_path: rel.into(),
            sex: if index % 2 == 0 { Sex::Female } else { Sex::Male },
            age_years: p.age,
            stage,
            roi,
        })
    });

    let records = results.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::from_records(records, out_dir);
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
