//! Grayscale formula images: rendering, stroke rasterization, geometric and
//! photometric transforms, and on-disk datasets.

mod glyphs;
pub mod layout;
pub mod manifest;
pub mod render;
pub mod strokes;
pub mod transform;

use std::path::{Path, PathBuf};

pub use manifest::{read_manifest, write_manifest, ManifestRow};
pub use render::{sample_render_params, Font, HttpRenderer, RenderParams, RendererBackend, StubRenderer};
pub use strokes::{parse_inkml, rasterize_strokes, InkSample, StrokeSet};
pub use transform::{
    augment, augment_random, normalize_intensity, resize_bilinear, resize_for_training, AugmentParams, AugmentRanges,
    Resized,
};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("invalid image dimensions {height}x{width}")]
    InvalidDimensions { height: usize, width: usize },
    #[error("intensity {value} at index {index} outside [0, 1]")]
    OutOfRange { index: usize, value: f32 },
    #[error("render failed: {0}")]
    RenderFailure(String),
    #[error("render request rejected: {0}")]
    BadParams(String),
    #[error("degenerate strokes: {0}")]
    DegenerateStrokes(String),
    #[error("inkml: {0}")]
    Inkml(String),
    #[error("png: {0}")]
    Png(#[from] ::image::ImageError),
    #[error("missing image {0}")]
    MissingImage(PathBuf),
    #[error("corrupt manifest at line {line}: {reason}")]
    CorruptManifest { line: usize, reason: String },
    #[error("renderer transport: {0}")]
    Transport(String),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ImageError>;

/// Row-major intensities in `[0, 1]`; background near 0, ink near 1.
#[derive(Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl std::fmt::Debug for GrayImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "GrayImage({}x{}, ink={:.3})", self.height, self.width, self.ink_fraction(0.5))
    }
}

impl GrayImage {
    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        check_dims(height, width)?;
        Ok(Self { height, width, data: vec![0.0; height * width] })
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width {
            return Err(ImageError::InvalidDimensions { height, width });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::OutOfRange { index, value });
        }
        Ok(Self { height, width, data })
    }

    /// Like [`from_vec`](Self::from_vec) but clamps values (NaN becomes 0).
    pub fn from_vec_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::from_vec(height, width, data)
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Result<Self> {
        check_dims(height, width)?;
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::from_vec_clamped(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// Writes are clamped into `[0, 1]`.
    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.data[row * self.width + col] = v.clamp(0.0, 1.0);
    }

    /// Keep the brighter of the current and given value.
    pub fn max_at(&mut self, row: usize, col: usize, v: f32) {
        let p = &mut self.data[row * self.width + col];
        *p = p.max(v.clamp(0.0, 1.0));
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Fraction of pixels strictly brighter than `threshold`.
    pub fn ink_fraction(&self, threshold: f32) -> f64 {
        self.data.iter().filter(|&&v| v > threshold).count() as f64 / self.data.len() as f64
    }

    /// Surround with `top`/`bottom`/`left`/`right` rows/columns of zeros.
    pub fn pad(&self, top: usize, bottom: usize, left: usize, right: usize) -> GrayImage {
        let (h, w) = (self.height + top + bottom, self.width + left + right);
        let mut out = vec![0.0; h * w];
        for r in 0..self.height {
            let dst = (r + top) * w + left;
            out[dst..dst + self.width].copy_from_slice(&self.data[r * self.width..(r + 1) * self.width]);
        }
        GrayImage { height: h, width: w, data: out }
    }

    pub fn pad_uniform(&self, p: usize) -> GrayImage {
        self.pad(p, p, p, p)
    }

    /// Zero-pad on the right up to `width` (no-op when already that wide).
    pub fn pad_to_width(&self, width: usize) -> GrayImage {
        self.pad(0, 0, 0, width.saturating_sub(self.width))
    }

    /// Copy `src` with its top-left corner at `(row, col)`, clipping at the border.
    pub fn blit(&mut self, src: &GrayImage, row: usize, col: usize) {
        for r in 0..src.height.min(self.height.saturating_sub(row)) {
            for c in 0..src.width.min(self.width.saturating_sub(col)) {
                self.data[(row + r) * self.width + col + c] = src.get(r, c);
            }
        }
    }

    /// Pixels `> threshold` bounding box as `(row0, col0, row1, col1)` inclusive.
    pub fn ink_bbox(&self, threshold: f32) -> Option<(usize, usize, usize, usize)> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) > threshold {
                    bbox = Some(match bbox {
                        None => (r, c, r, c),
                        Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
                    });
                }
            }
        }
        bbox
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let buf = self.to_luma8();
        let mut out = std::io::Cursor::new(Vec::new());
        buf.write_to(&mut out, ::image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = ::image::load_from_memory_with_format(bytes, ::image::ImageFormat::Png)?;
        Ok(Self::from_luma8(&img.to_luma8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_luma8().save_with_format(path, ::image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(ImageError::MissingImage(path.to_path_buf()));
        }
        let img = ::image::open(path)?;
        Ok(Self::from_luma8(&img.to_luma8()))
    }

    fn to_luma8(&self) -> ::image::GrayImage {
        let px = self.data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        ::image::GrayImage::from_raw(self.width as u32, self.height as u32, px).expect("buffer matches dims")
    }

    fn from_luma8(img: &::image::GrayImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&p| p as f32 / 255.0).collect();
        Self { height: h as usize, width: w as usize, data }
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(ImageError::InvalidDimensions { height, width });
    }
    Ok(())
}
