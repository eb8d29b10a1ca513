//! Formula rendering backends.

use std::time::Duration;

use base64::Engine as _;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::glyphs::{COLS, ROWS};
use super::layout::{layout, DisplayList, Item};
use super::strokes::draw_segment;
use super::transform::normalize_intensity;
use super::{GrayImage, ImageError, Result};
use crate::corpus::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Font {
    MathSf,
    MathTt,
    MathIt,
    MathBf,
    MathRm,
    MathNormal,
    TextStyle,
}

impl Font {
    pub const ALL: [Font; 7] =
        [Font::MathSf, Font::MathTt, Font::MathIt, Font::MathBf, Font::MathRm, Font::MathNormal, Font::TextStyle];

    pub fn name(self) -> &'static str {
        match self {
            Font::MathSf => "mathsf",
            Font::MathTt => "mathtt",
            Font::MathIt => "mathit",
            Font::MathBf => "mathbf",
            Font::MathRm => "mathrm",
            Font::MathNormal => "mathnormal",
            Font::TextStyle => "textstyle",
        }
    }
}

impl std::str::FromStr for Font {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Font::ALL.into_iter().find(|f| f.name() == s).ok_or_else(|| format!("unknown font {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RenderParams {
    pub font: Font,
    /// Blank border on every side, pixels.
    pub padding: u32,
    pub font_size: u32,
}

impl RenderParams {
    pub const PADDING_RANGE: std::ops::RangeInclusive<u32> = 0..=15;
    pub const FONT_SIZE_RANGE: std::ops::RangeInclusive<u32> = 16..=50;

    pub fn new(font: Font, padding: u32, font_size: u32) -> Result<Self> {
        let p = Self { font, padding, font_size };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !Self::PADDING_RANGE.contains(&self.padding) {
            return Err(ImageError::BadParams(format!("padding {} outside 0..=15", self.padding)));
        }
        if !Self::FONT_SIZE_RANGE.contains(&self.font_size) {
            return Err(ImageError::BadParams(format!("font_size {} outside 16..=50", self.font_size)));
        }
        Ok(())
    }
}

impl Default for RenderParams {
    fn default() -> Self {
        Self { font: Font::MathRm, padding: 0, font_size: 32 }
    }
}

/// Uniform draw of font, padding and font size.
pub fn sample_render_params<R: Rng + ?Sized>(rng: &mut R) -> RenderParams {
    RenderParams {
        font: Font::ALL[rng.random_range(0..Font::ALL.len())],
        padding: rng.random_range(RenderParams::PADDING_RANGE),
        font_size: rng.random_range(RenderParams::FONT_SIZE_RANGE),
    }
}

/// Turns LaTeX into a normalized grayscale image.
pub trait RendererBackend: Send + Sync {
    fn render(&self, latex: &str, params: &RenderParams) -> Result<GrayImage>;

    fn name(&self) -> String;
}

/// Deterministic in-process renderer built on the 5×7 glyph table.
///
/// A glyph occupies a `font_size × font_size` cell (scaled horizontally by
/// the font's width factor); the cell is a 7 × 9 dot grid with the glyph in
/// the inner 5 × 7 dots.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubRenderer;

impl StubRenderer {
    pub fn layout(&self, latex: &str, params: &RenderParams) -> Result<DisplayList> {
        params.validate()?;
        let tokens = tokenize(latex).map_err(|e| ImageError::RenderFailure(e.to_string()))?;
        layout(tokens.tokens(), params.font_size, params.font).map_err(ImageError::RenderFailure)
    }
}

impl RendererBackend for StubRenderer {
    fn render(&self, latex: &str, params: &RenderParams) -> Result<GrayImage> {
        let dl = self.layout(latex, params)?;
        Ok(rasterize_display_list(&dl)?.pad_uniform(params.padding as usize))
    }

    fn name(&self) -> String {
        "stub".into()
    }
}

/// Draw a display list; the canvas grows to fit slanted glyphs.
pub fn rasterize_display_list(dl: &DisplayList) -> Result<GrayImage> {
    let mut right = dl.width;
    for it in &dl.items {
        if let Item::Glyph { x, w, h, style, .. } = it {
            right = right.max(x + w + style.slant * h);
        }
    }
    let mut img = GrayImage::zeros(dl.height.ceil() as usize, right.ceil() as usize)?;
    for it in &dl.items {
        match *it {
            Item::Glyph { glyph, x, y, w, h, style } => {
                let (x0, y0) = (x.round() as i64, y.round() as i64);
                let (cw, ch) = (w.round().max(1.0), h.round().max(1.0));
                let bold = if style.bold { (ch / 16.0).round().max(1.0) } else { 0.0 };
                let extra = (style.slant * ch).ceil() as i64 + bold as i64;
                for v in 0..ch as i64 {
                    let gy = (v as f32 * (ROWS + 2) as f32 / ch).floor() as i64 - 1;
                    if !(0..ROWS as i64).contains(&gy) {
                        continue;
                    }
                    let shift = style.slant * (ch - v as f32 - 0.5);
                    for du in 0..cw as i64 + extra {
                        let lit = |u: f32| {
                            let gx = (u * (COLS + 2) as f32 / cw).floor() as i64 - 1;
                            u >= 0.0 && (0..COLS as i64).contains(&gx) && glyph.lit(gy as usize, gx as usize)
                        };
                        let u = du as f32 - shift;
                        if lit(u) || (bold > 0.0 && lit(u - bold)) {
                            let (r, c) = (y0 + v, x0 + du);
                            if r >= 0 && c >= 0 && (r as usize) < img.height() && (c as usize) < img.width() {
                                img.set(r as usize, c as usize, 1.0);
                            }
                        }
                    }
                }
            }
            Item::Rule { x0, y0, x1, y1, thickness } => draw_segment(&mut img, (x0, y0), (x1, y1), thickness),
        }
    }
    Ok(img)
}

/// Client for the HTTP render service.
#[derive(Debug, Clone)]
pub struct HttpRenderer {
    base_url: String,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct RenderRequest<'a> {
    latex: &'a str,
    font: &'static str,
    font_size: u32,
    padding: u32,
}

#[derive(Deserialize)]
struct BatchElement {
    png: Option<String>,
    error: Option<String>,
    status: Option<u16>,
}

impl HttpRenderer {
    pub const DEFAULT_PORT: u16 = 8321;

    pub fn new(base_url: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        Self { base_url: base_url.into().trim_end_matches('/').to_string(), agent }
    }

    /// `RENDER_URL` if set, else localhost on `RENDER_PORT` (default 8321).
    pub fn from_env() -> Self {
        if let Ok(url) = std::env::var("RENDER_URL") {
            return Self::new(url);
        }
        let port = std::env::var("RENDER_PORT").ok().and_then(|p| p.parse().ok()).unwrap_or(Self::DEFAULT_PORT);
        Self::new(format!("http://127.0.0.1:{port}"))
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn request_body<'a>(latex: &'a str, params: &RenderParams) -> RenderRequest<'a> {
        RenderRequest { latex, font: params.font.name(), font_size: params.font_size, padding: params.padding }
    }

    fn transport(e: impl std::fmt::Display) -> ImageError {
        ImageError::Transport(e.to_string())
    }

    /// Raw PNG bytes for one request.
    pub fn render_png(&self, latex: &str, params: &RenderParams) -> Result<Vec<u8>> {
        params.validate()?;
        let body = serde_json::to_vec(&Self::request_body(latex, params)).map_err(Self::transport)?;
        let mut resp = self
            .agent
            .post(format!("{}/render", self.base_url))
            .header("content-type", "application/json")
            .send(&body[..])
            .map_err(Self::transport)?;
        let status = resp.status().as_u16();
        match status {
            200 => resp.body_mut().read_to_vec().map_err(Self::transport),
            _ => {
                let msg = resp.body_mut().read_to_string().unwrap_or_default();
                Err(status_error(status, msg))
            }
        }
    }

    /// One result per request, in order.
    pub fn render_batch(&self, requests: &[(&str, RenderParams)]) -> Result<Vec<Result<GrayImage>>> {
        let bodies: Vec<_> = requests.iter().map(|(l, p)| Self::request_body(l, p)).collect();
        let body = serde_json::to_vec(&bodies).map_err(Self::transport)?;
        let mut resp = self
            .agent
            .post(format!("{}/render/batch", self.base_url))
            .header("content-type", "application/json")
            .send(&body[..])
            .map_err(Self::transport)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(Self::transport)?;
        if status != 200 {
            return Err(status_error(status, text));
        }
        let elems: Vec<BatchElement> = serde_json::from_str(&text).map_err(Self::transport)?;
        if elems.len() != requests.len() {
            return Err(ImageError::Transport(format!("batch returned {} of {} results", elems.len(), requests.len())));
        }
        Ok(elems
            .into_iter()
            .map(|e| match (e.png, e.error) {
                (Some(b64), _) => {
                    let bytes = base64::engine::general_purpose::STANDARD.decode(b64).map_err(Self::transport)?;
                    Ok(normalize_intensity(&GrayImage::from_png_bytes(&bytes)?))
                }
                (None, Some(err)) => Err(status_error(e.status.unwrap_or(422), err)),
                (None, None) => Err(ImageError::Transport("batch element has neither png nor error".into())),
            })
            .collect())
    }

    /// Version string reported by `GET /health`.
    pub fn health(&self) -> Result<String> {
        let mut resp = self.agent.get(format!("{}/health", self.base_url)).call().map_err(Self::transport)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(Self::transport)?;
        if status == 200 {
            Ok(text)
        } else {
            Err(status_error(status, text))
        }
    }
}

fn status_error(status: u16, msg: String) -> ImageError {
    match status {
        422 => ImageError::RenderFailure(msg),
        400 => ImageError::BadParams(msg),
        s => ImageError::Transport(format!("HTTP {s}: {msg}")),
    }
}

impl RendererBackend for HttpRenderer {
    fn render(&self, latex: &str, params: &RenderParams) -> Result<GrayImage> {
        let png = self.render_png(latex, params)?;
        Ok(normalize_intensity(&GrayImage::from_png_bytes(&png)?))
    }

    fn name(&self) -> String {
        format!("http:{}", self.base_url)
    }
}

#[cfg(test)]
mod tests {
    use super::super::glyphs;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn x_at_16px_is_the_scaled_glyph() {
        let p = RenderParams::new(Font::MathRm, 0, 16).unwrap();
        let img = StubRenderer.render("x", &p).unwrap();
        assert_eq!((img.height(), img.width()), (16, 16));
        let g = glyphs::lookup("x").unwrap();
        for r in 0..16 {
            for c in 0..16 {
                let (gy, gx) = ((r * 9 / 16) as i64 - 1, (c * 7 / 16) as i64 - 1);
                let want = (0..7).contains(&gy) && (0..5).contains(&gx) && g.lit(gy as usize, gx as usize);
                assert_eq!(img.get(r, c) == 1.0, want, "pixel {r},{c}");
            }
        }
    }

    #[test]
    fn padding_surrounds_content() {
        let p = RenderParams::new(Font::MathBf, 4, 32).unwrap();
        let img = StubRenderer.render("x^{2}", &p).unwrap();
        let (r0, c0, r1, c1) = img.ink_bbox(0.0).unwrap();
        assert!(r0 >= 4 && c0 >= 4 && r1 + 4 < img.height() && c1 + 4 < img.width());
    }

    #[test]
    fn fonts_change_pixels() {
        let imgs: Vec<_> = Font::ALL
            .iter()
            .filter(|f| **f != Font::TextStyle)
            .map(|&f| StubRenderer.render("ab", &RenderParams::new(f, 0, 24).unwrap()).unwrap())
            .collect();
        for i in 0..imgs.len() {
            for j in i + 1..imgs.len() {
                assert_ne!(imgs[i], imgs[j]);
            }
        }
    }

    #[test]
    fn empty_and_unknown_fail() {
        let p = RenderParams::default();
        assert!(matches!(StubRenderer.render("", &p), Err(ImageError::RenderFailure(_))));
        assert!(matches!(StubRenderer.render("\\foo", &p), Err(ImageError::RenderFailure(_))));
        assert!(matches!(StubRenderer.render("{x", &p), Err(ImageError::RenderFailure(_))));
        assert!(matches!(StubRenderer.render("x", &RenderParams { font_size: 8, ..p }), Err(ImageError::BadParams(_))));
    }

    #[test]
    fn sampled_params_are_in_domain_and_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p = sample_render_params(&mut a);
            assert!(p.validate().is_ok());
            assert_eq!(p, sample_render_params(&mut b));
        }
    }
}
