//! Geometric augmentation, intensity normalization and resizing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::GrayImage;

/// One concrete augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Degrees, counter-clockwise as displayed.
    pub rotation: f32,
    /// Horizontal shear factor (`x += shear * y`).
    pub shear: f32,
    /// Zero border added on every side.
    pub border_pad: usize,
    /// Horizontal stretch.
    pub aspect_scale: f32,
}

impl AugmentParams {
    pub fn identity(border_pad: usize) -> Self {
        Self { rotation: 0.0, shear: 0.0, border_pad, aspect_scale: 1.0 }
    }

    fn is_identity_warp(&self) -> bool {
        self.rotation == 0.0 && self.shear == 0.0 && self.aspect_scale == 1.0
    }
}

/// Sampling ranges for [`AugmentParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentRanges {
    pub max_rotation: f32,
    pub max_shear: f32,
    pub border_pad: (usize, usize),
    pub aspect_scale: (f32, f32),
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self { max_rotation: 4.0, max_shear: 0.1, border_pad: (10, 20), aspect_scale: (0.9, 1.1) }
    }
}

impl AugmentRanges {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentParams {
        let sym = |rng: &mut R, m: f32| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        AugmentParams {
            rotation: sym(rng, self.max_rotation),
            shear: sym(rng, self.max_shear),
            border_pad: rng.random_range(self.border_pad.0..=self.border_pad.1),
            aspect_scale: rng.random_range(self.aspect_scale.0..=self.aspect_scale.1),
        }
    }
}

/// Bilinear sample at continuous pixel coordinates (pixel centres at
/// integer positions); zero outside the image.
fn sample_zero(img: &GrayImage, x: f32, y: f32) -> f32 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let at = |r: f32, c: f32| -> f32 {
        if r < 0.0 || c < 0.0 || r >= img.height() as f32 || c >= img.width() as f32 {
            0.0
        } else {
            img.get(r as usize, c as usize)
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + if fx > 0.0 { at(y0, x0 + 1.0) * fx } else { 0.0 };
    if fy == 0.0 {
        return top;
    }
    let bottom = at(y0 + 1.0, x0) * (1.0 - fx) + if fx > 0.0 { at(y0 + 1.0, x0 + 1.0) * fx } else { 0.0 };
    top * (1.0 - fy) + bottom * fy
}

/// Rotate, shear and stretch about the image centre, crop to the warped
/// bounds, then zero-pad by `border_pad` on every side.
pub fn augment(img: &GrayImage, params: &AugmentParams) -> GrayImage {
    if params.is_identity_warp() {
        return img.pad_uniform(params.border_pad);
    }
    let t = params.rotation.to_radians();
    let (c, s) = (t.cos(), t.sin());
    // forward = rotation * shear * stretch
    let a = [
        [c * params.aspect_scale, (c * params.shear + s)],
        [-s * params.aspect_scale, (-s * params.shear + c)],
    ];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    let (hw, hh) = (img.width() as f32 / 2.0, img.height() as f32 / 2.0);
    let corners = [(-hw, -hh), (hw, -hh), (-hw, hh), (hw, hh)];
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f32::MAX, f32::MIN, f32::MAX, f32::MIN);
    for (x, y) in corners {
        let (u, v) = (a[0][0] * x + a[0][1] * y, a[1][0] * x + a[1][1] * y);
        xmin = xmin.min(u);
        xmax = xmax.max(u);
        ymin = ymin.min(v);
        ymax = ymax.max(v);
    }
    let out_w = ((xmax - xmin) - 1e-3).ceil().max(1.0) as usize;
    let out_h = ((ymax - ymin) - 1e-3).ceil().max(1.0) as usize;
    let (ow, oh) = (out_w as f32 / 2.0, out_h as f32 / 2.0);
    let warped = GrayImage::from_fn(out_h, out_w, |r, col| {
        let (u, v) = (col as f32 + 0.5 - ow, r as f32 + 0.5 - oh);
        let (x, y) = (inv[0][0] * u + inv[0][1] * v, inv[1][0] * u + inv[1][1] * v);
        sample_zero(img, x + hw - 0.5, y + hh - 0.5)
    })
    .expect("positive dims");
    warped.pad_uniform(params.border_pad)
}

/// Draw parameters from `ranges` and apply them.
pub fn augment_random<R: Rng + ?Sized>(img: &GrayImage, ranges: &AugmentRanges, rng: &mut R) -> (GrayImage, AugmentParams) {
    let p = ranges.sample(rng);
    (augment(img, &p), p)
}

const BINS: usize = 256;

/// Background estimate: lower median of the values in the most populated
/// histogram bin (lowest bin on ties).
fn background_level(data: &[f32]) -> f32 {
    let bin = |v: f32| ((v * BINS as f32) as usize).min(BINS - 1);
    let mut counts = [0usize; BINS];
    for &v in data {
        counts[bin(v)] += 1;
    }
    let mode = (0..BINS).fold(0, |best, b| if counts[b] > counts[best] { b } else { best });
    let mut members: Vec<f32> = data.iter().copied().filter(|&v| bin(v) == mode).collect();
    members.sort_by(f32::total_cmp);
    members[(members.len() - 1) / 2]
}

/// Nearest-rank 99th percentile of values strictly above `bg`.
fn ink_level(data: &[f32], bg: f32) -> Option<f32> {
    let mut above: Vec<f32> = data.iter().copied().filter(|&v| v > bg).collect();
    if above.is_empty() {
        return None;
    }
    above.sort_by(f32::total_cmp);
    let rank = ((0.99 * above.len() as f64).ceil() as usize).max(1);
    Some(above[rank - 1])
}

/// Map background to 0 and ink to 1 with an affine ramp, clamped; bright
/// backgrounds are inverted first. Images with fewer than two distinct
/// values are returned unchanged.
pub fn normalize_intensity(img: &GrayImage) -> GrayImage {
    let data = img.data();
    if data.iter().all(|&v| v == data[0]) {
        return img.clone();
    }
    let mut values = data.to_vec();
    let mut bg = background_level(&values);
    let mut invert = bg > 0.5;
    if !invert && ink_level(&values, bg).is_none() {
        invert = true;
    }
    if invert {
        for v in &mut values {
            *v = 1.0 - *v;
        }
        bg = 1.0 - bg;
    }
    let Some(ink) = ink_level(&values, bg) else { return img.clone() };
    let span = ink - bg;
    if span <= 1e-6 {
        return img.clone();
    }
    for v in &mut values {
        *v = ((*v - bg) / span).clamp(0.0, 1.0);
    }
    GrayImage::from_vec(img.height(), img.width(), values).expect("clamped")
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &GrayImage, height: usize, width: usize) -> GrayImage {
    assert!(height > 0 && width > 0, "resize to empty image");
    if (height, width) == (img.height(), img.width()) {
        return img.clone();
    }
    let sy = img.height() as f32 / height as f32;
    let sx = img.width() as f32 / width as f32;
    let (hmax, wmax) = (img.height() - 1, img.width() - 1);
    GrayImage::from_fn(height, width, |r, c| {
        let y = ((r as f32 + 0.5) * sy - 0.5).clamp(0.0, hmax as f32);
        let x = ((c as f32 + 0.5) * sx - 0.5).clamp(0.0, wmax as f32);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(hmax), (x0 + 1).min(wmax));
        let (fy, fx) = (y - y0 as f32, x - x0 as f32);
        let top = img.get(y0, x0) * (1.0 - fx) + img.get(y0, x1) * fx;
        let bottom = img.get(y1, x0) * (1.0 - fx) + img.get(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
    .expect("positive dims")
}

/// Width after an aspect-preserving rescale to `target_height`.
pub fn scaled_width(height: usize, width: usize, target_height: usize) -> usize {
    ((width as f64 * target_height as f64 / height as f64).round() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Resized {
    Accepted(GrayImage),
    Rejected { width: usize },
}

impl Resized {
    pub fn accepted(self) -> Option<GrayImage> {
        match self {
            Resized::Accepted(img) => Some(img),
            Resized::Rejected { .. } => None,
        }
    }
}

/// Scale to `target_height` keeping the aspect ratio; reject when the
/// resulting width exceeds `max_width`.
pub fn resize_for_training(img: &GrayImage, target_height: usize, max_width: usize) -> Resized {
    let width = scaled_width(img.height(), img.width(), target_height);
    if width > max_width {
        return Resized::Rejected { width };
    }
    Resized::Accepted(resize_bilinear(img, target_height, width))
}
