//! Image primitives and the record preparation pipeline.
//!
//! Intensities are `f32` in the canonical `[0, 255]` range (filter responses
//! stored in the same container are exempt). Layout is row-major
//! `(y, x, channel)`.
//!
//! The evaluation-side preparation of a record is crop → resize → patches and
//! nothing else; see [`eval_base_image`]. Augmentation lives in
//! [`augment`] and is only reachable from the training loop.

pub mod augment;

pub use augment::{apply_policy, augment_patchset, AugPolicy, PatchAugParams};

use std::path::Path;

use crate::dataset::{Roi, SubjectRecord};
use crate::error::{Error, Result};

/// Height of the canonical region-of-interest crop (three vertebral bodies).
pub const ROI_H: usize = 77;
/// Width of the canonical region-of-interest crop.
pub const ROI_W: usize = 35;
/// Patches are square cuts of this side length.
pub const PATCH: usize = 35;
/// Number of overlapping patches cut from the ROI.
pub const PATCH_COUNT: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        assert!(h > 0 && w > 0 && c > 0, "empty image");
        ImageBuffer {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn from_fn(h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut img = ImageBuffer::new(h, w, c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = f(y, x, ch);
                    img.data[(y * w + x) * c + ch] = v;
                }
            }
        }
        img
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), h * w * c, "data length must match dimensions");
        ImageBuffer { h, w, c, data }
    }

    pub fn constant(h: usize, w: usize, c: usize, v: f32) -> Self {
        ImageBuffer {
            h,
            w,
            c,
            data: vec![v; h * w * c],
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn channels(&self) -> usize {
        self.c
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f32 {
        debug_assert!(y < self.h && x < self.w && ch < self.c);
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f32) {
        debug_assert!(y < self.h && x < self.w && ch < self.c);
        self.data[(y * self.w + x) * self.c + ch] = v;
    }

    /// Bilinear sample of channel `ch` at fractional `(y, x)`; zero outside.
    ///
    /// Uses the lerp form `a + t·(b − a)`, which reproduces constant regions
    /// and integer-coordinate samples exactly.
    pub fn sample_bilinear_zero(&self, y: f64, x: f64, ch: usize) -> f32 {
        if y <= -1.0 || x <= -1.0 || y >= self.h as f64 || x >= self.w as f64 {
            return 0.0;
        }
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = (y - y0) as f32;
        let fx = (x - x0) as f32;
        let y0 = y0 as isize;
        let x0 = x0 as isize;
        let at = |yy: isize, xx: isize| -> f32 {
            if yy < 0 || xx < 0 || yy >= self.h as isize || xx >= self.w as isize {
                0.0
            } else {
                self.get(yy as usize, xx as usize, ch)
            }
        };
        let p00 = at(y0, x0);
        let p01 = at(y0, x0 + 1);
        let p10 = at(y0 + 1, x0);
        let p11 = at(y0 + 1, x0 + 1);
        let top = p00 + fx * (p01 - p00);
        let bot = p10 + fx * (p11 - p10);
        top + fy * (bot - top)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Decode an 8-bit grayscale PNG. Non-gray inputs are converted to luma.
pub fn load_png(path: &Path) -> Result<ImageBuffer> {
    let img = image::ImageReader::open(path)
        .map_err(|source| Error::Read {
            path: path.to_path_buf(),
            source,
        })?
        .decode()
        .map_err(|source| Error::ImageDecode {
            path: path.to_path_buf(),
            source,
        })?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(ImageBuffer {
        h,
        w,
        c: 1,
        data: img.into_raw().into_iter().map(|v| v as f32).collect(),
    })
}

/// Encode a single-channel buffer as an 8-bit grayscale PNG, rounding and
/// clamping intensities to `[0, 255]`.
pub fn save_png(img: &ImageBuffer, path: &Path) -> Result<()> {
    assert_eq!(img.c, 1, "PNG export requires a single-channel buffer");
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    let gray = image::GrayImage::from_raw(img.w as u32, img.h as u32, bytes)
        .expect("dimensions already validated");
    gray.save(path).map_err(|source| Error::ImageEncode {
        path: path.to_path_buf(),
        source,
    })
}

/// Cut the region of interest out of a source image.
pub fn crop_roi(img: &ImageBuffer, roi: &Roi) -> Result<ImageBuffer> {
    let (x, y, w, h) = (roi.x as usize, roi.y as usize, roi.w as usize, roi.h as usize);
    if w == 0 || h == 0 {
        return Err(Error::geometry("crop_roi", "empty ROI".to_string()));
    }
    if y + h > img.h || x + w > img.w {
        return Err(Error::geometry(
            "crop_roi",
            format!(
                "ROI {}x{}+{}+{} exceeds image {}x{}",
                w, h, x, y, img.w, img.h
            ),
        ));
    }
    let mut out = ImageBuffer::new(h, w, img.c);
    for oy in 0..h {
        let src = ((y + oy) * img.w + x) * img.c;
        let dst = oy * w * img.c;
        out.data[dst..dst + w * img.c].copy_from_slice(&img.data[src..src + w * img.c]);
    }
    Ok(out)
}

/// Bilinear resize with half-pixel centre alignment. Same-size calls return a
/// bit-identical copy; constants stay constant.
pub fn resize_bilinear(img: &ImageBuffer, oh: usize, ow: usize) -> ImageBuffer {
    assert!(oh > 0 && ow > 0, "empty resize target");
    let sy = img.h as f64 / oh as f64;
    let sx = img.w as f64 / ow as f64;
    let mut out = ImageBuffer::new(oh, ow, img.c);
    for oy in 0..oh {
        let y = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.h - 1) as f64);
        for ox in 0..ow {
            let x = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.w - 1) as f64);
            for ch in 0..img.c {
                out.set(oy, ox, ch, img.sample_bilinear_zero(y, x, ch));
            }
        }
    }
    out
}

/// Integer translation by `(dx, dy)` with zero-filled edges:
/// `out(y, x) = in(y − dy, x − dx)`.
pub fn translate(img: &ImageBuffer, dx: i64, dy: i64) -> ImageBuffer {
    let mut out = ImageBuffer::new(img.h, img.w, img.c);
    for oy in 0..img.h {
        let sy = oy as i64 - dy;
        if sy < 0 || sy >= img.h as i64 {
            continue;
        }
        for ox in 0..img.w {
            let sx = ox as i64 - dx;
            if sx < 0 || sx >= img.w as i64 {
                continue;
            }
            for ch in 0..img.c {
                out.set(oy, ox, ch, img.get(sy as usize, sx as usize, ch));
            }
        }
    }
    out
}

/// Rotate about the image centre by `angle_deg` (counter-clockwise in image
/// coordinates), bilinear resampling, zero fill outside the source.
pub fn rotate(img: &ImageBuffer, angle_deg: f64) -> ImageBuffer {
    let rad = angle_deg.to_radians();
    let (sin, cos) = rad.sin_cos();
    let cy = (img.h as f64 - 1.0) / 2.0;
    let cx = (img.w as f64 - 1.0) / 2.0;
    let mut out = ImageBuffer::new(img.h, img.w, img.c);
    for oy in 0..img.h {
        let ry = oy as f64 - cy;
        for ox in 0..img.w {
            let rx = ox as f64 - cx;
            // Inverse map: rotate the output grid by −angle.
            let sx = cx + cos * rx + sin * ry;
            let sy = cy - sin * rx + cos * ry;
            for ch in 0..img.c {
                out.set(oy, ox, ch, img.sample_bilinear_zero(sy, sx, ch));
            }
        }
    }
    out
}

/// Rotation restricted to patch-sized inputs and small angles.
pub fn rotate_patch(patch: &ImageBuffer, angle_deg: f64) -> ImageBuffer {
    debug_assert!(angle_deg.abs() <= 15.0, "patch rotation is a small-angle op");
    rotate(patch, angle_deg)
}

/// Multiply intensities by `factor`, clamping to `[0, 255]`.
pub fn scale_clamp(img: &ImageBuffer, factor: f32) -> ImageBuffer {
    let mut out = img.clone();
    for v in out.data.iter_mut() {
        *v = (*v * factor).clamp(0.0, 255.0);
    }
    out
}

/// Min–max contrast stretch to `[0, 255]`, per channel. Constant channels are
/// returned unchanged; extremes map to exactly 0 and 255, which makes the op
/// idempotent bit-for-bit.
pub fn autocontrast(img: &ImageBuffer) -> ImageBuffer {
    let mut out = img.clone();
    for ch in 0..img.c {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for y in 0..img.h {
            for x in 0..img.w {
                let v = img.get(y, x, ch);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if hi <= lo {
            continue;
        }
        let scale = 255.0 / (hi - lo);
        for y in 0..img.h {
            for x in 0..img.w {
                let v = img.get(y, x, ch);
                let stretched = if v == hi {
                    255.0
                } else if v == lo {
                    0.0
                } else {
                    (v - lo) * scale
                };
                out.set(y, x, ch, stretched);
            }
        }
    }
    out
}

/// Top-row offsets of `n` patches of height `patch` evenly spread over an
/// image of height `image_h` (first at 0, last at `image_h − patch`).
pub fn patch_offsets(image_h: usize, patch: usize, n: usize) -> Result<Vec<usize>> {
    if patch > image_h {
        return Err(Error::geometry(
            "patch_offsets",
            format!("patch height {} exceeds image height {}", patch, image_h),
        ));
    }
    if n == 0 {
        return Err(Error::geometry("patch_offsets", "zero patches requested".to_string()));
    }
    let span = (image_h - patch) as f64;
    if n == 1 {
        return Ok(vec![(span / 2.0).round() as usize]);
    }
    Ok((0..n)
        .map(|i| (span * i as f64 / (n - 1) as f64).round() as usize)
        .collect())
}

/// The three overlapping square patches cut from a ROI image, top to bottom.
#[derive(Clone, Debug)]
pub struct PatchSet {
    pub patches: [ImageBuffer; PATCH_COUNT],
}

/// Cut [`PATCH_COUNT`] square patches of side [`PATCH`] from a single-channel
/// image of width exactly [`PATCH`].
pub fn extract_patches(img: &ImageBuffer) -> Result<PatchSet> {
    if img.c != 1 || img.w != PATCH {
        return Err(Error::geometry(
            "extract_patches",
            format!("expected a {}-wide single-channel image, got {}x{}x{}", PATCH, img.h, img.w, img.c),
        ));
    }
    let offsets = patch_offsets(img.h, PATCH, PATCH_COUNT)?;
    let cut = |top: usize| {
        crop_roi(
            img,
            &Roi {
                x: 0,
                y: top as u32,
                w: PATCH as u32,
                h: PATCH as u32,
            },
        )
    };
    Ok(PatchSet {
        patches: [cut(offsets[0])?, cut(offsets[1])?, cut(offsets[2])?],
    })
}

/// Stack the three patches into one `PATCH × PATCH × 3` buffer
/// (channel i = patch i).
pub fn stack_patches(ps: &PatchSet) -> ImageBuffer {
    let mut out = ImageBuffer::new(PATCH, PATCH, PATCH_COUNT);
    for (i, p) in ps.patches.iter().enumerate() {
        assert_eq!((p.h, p.w, p.c), (PATCH, PATCH, 1), "malformed patch");
        for y in 0..PATCH {
            for x in 0..PATCH {
                out.set(y, x, i, p.get(y, x, 0));
            }
        }
    }
    out
}

/// Deterministic evaluation-side preparation of one record: load, crop the
/// ROI when present, resize to the canonical `ROI_H × ROI_W`. A record with
/// no ROI must already be canonical-size — resizing a full radiograph as if
/// it were the spine crop would silently feed garbage downstream. No
/// augmentation op is reachable from here.
pub fn eval_base_image(record: &SubjectRecord, base_dir: &Path) -> Result<ImageBuffer> {
    let path = record.resolved_path(base_dir);
    let mut img = load_png(&path)?;
    match &record.roi {
        Some(roi) => {
            img = crop_roi(&img, roi)?;
            if img.h != ROI_H || img.w != ROI_W {
                img = resize_bilinear(&img, ROI_H, ROI_W);
            }
        }
        None if img.h != ROI_H || img.w != ROI_W => {
            return Err(Error::geometry(
                "prepare",
                format!(
                    "{} is {}×{} with no ROI; records need an ROI unless already {ROI_H}×{ROI_W}",
                    path.display(),
                    img.h,
                    img.w
                ),
            ));
        }
        None => {}
    }
    Ok(img)
}
