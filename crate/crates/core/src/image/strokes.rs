//! Pen strokes: InkML parsing, rasterization, and pseudo-handwriting built
//! from the stub renderer's layout.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::glyphs::{COLS, ROWS};
use super::layout::Item;
use super::render::{RenderParams, StubRenderer};
use super::{GrayImage, ImageError, Result};

pub type Point = (f32, f32);

/// Polylines in arbitrary input units.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StrokeSet {
    pub strokes: Vec<Vec<Point>>,
}

impl StrokeSet {
    pub fn new(strokes: Vec<Vec<Point>>) -> Self {
        Self { strokes }
    }

    /// `(min_x, min_y, max_x, max_y)` over all points.
    pub fn bbox(&self) -> Option<(f32, f32, f32, f32)> {
        let mut pts = self.strokes.iter().flatten();
        let &(x, y) = pts.next()?;
        Some(pts.fold((x, y, x, y), |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y))))
    }

    pub fn num_points(&self) -> usize {
        self.strokes.iter().map(Vec::len).sum()
    }
}

/// Traces and the ground-truth annotation of one InkML document.
#[derive(Debug, Clone, PartialEq)]
pub struct InkSample {
    pub strokes: StrokeSet,
    pub truth: Option<String>,
}

fn unescape(s: &str) -> String {
    s.replace("&lt;", "<").replace("&gt;", ">").replace("&quot;", "\"").replace("&apos;", "'").replace("&amp;", "&")
}

/// Contents of every `<tag ...>...</tag>` element, with the opening tag text.
fn elements<'a>(doc: &'a str, tag: &str) -> Vec<(&'a str, &'a str)> {
    let open = format!("<{tag}");
    let close = format!("</{tag}>");
    let mut out = Vec::new();
    let mut rest = doc;
    while let Some(start) = rest.find(&open) {
        let after = &rest[start + open.len()..];
        if !after.starts_with(|c: char| c.is_whitespace() || c == '>' || c == '/') {
            rest = after;
            continue;
        }
        let Some(gt) = after.find('>') else { break };
        let head = &after[..gt];
        if head.ends_with('/') {
            out.push((head, ""));
            rest = &after[gt + 1..];
            continue;
        }
        let body = &after[gt + 1..];
        let Some(end) = body.find(&close) else { break };
        out.push((head, &body[..end]));
        rest = &body[end + close.len()..];
    }
    out
}

/// Parse `trace` elements (comma-separated points, `x y [t ...]` each) and
/// the `annotation type="truth"` element.
pub fn parse_inkml(doc: &str) -> Result<InkSample> {
    let mut strokes = Vec::new();
    for (i, (_, body)) in elements(doc, "trace").into_iter().enumerate() {
        let mut pts = Vec::new();
        for p in body.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let nums: Vec<f32> = p
                .split_whitespace()
                .take(2)
                .map(|v| v.parse::<f32>().map_err(|_| ImageError::Inkml(format!("trace {i}: bad number {v:?}"))))
                .collect::<Result<_>>()?;
            if nums.len() < 2 || !nums.iter().all(|v| v.is_finite()) {
                return Err(ImageError::Inkml(format!("trace {i}: point {p:?} needs x and y")));
            }
            pts.push((nums[0], nums[1]));
        }
        if pts.is_empty() {
            return Err(ImageError::Inkml(format!("trace {i} has no points")));
        }
        strokes.push(pts);
    }
    let truth = elements(doc, "annotation")
        .into_iter()
        .find(|(head, _)| head.contains("type=\"truth\""))
        .map(|(_, body)| unescape(body.trim()).trim_matches('$').trim().to_string());
    Ok(InkSample { strokes: StrokeSet::new(strokes), truth })
}

fn segment_distance(p: Point, a: Point, b: Point) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Set every pixel whose centre lies within `thickness / 2` of segment `a–b`.
pub(crate) fn draw_segment(img: &mut GrayImage, a: Point, b: Point, thickness: f32) {
    let r = thickness / 2.0;
    let x_lo = (a.0.min(b.0) - r - 1.0).floor().max(0.0) as usize;
    let y_lo = (a.1.min(b.1) - r - 1.0).floor().max(0.0) as usize;
    let x_hi = ((a.0.max(b.0) + r + 1.0).ceil().max(0.0) as usize).min(img.width());
    let y_hi = ((a.1.max(b.1) + r + 1.0).ceil().max(0.0) as usize).min(img.height());
    for row in y_lo..y_hi {
        for col in x_lo..x_hi {
            if segment_distance((col as f32 + 0.5, row as f32 + 0.5), a, b) <= r + 1e-4 {
                img.set(row, col, 1.0);
            }
        }
    }
}

/// Default pen width for a given output height.
pub fn default_line_width(target_height: usize) -> f32 {
    (target_height as f32 / 64.0).max(1.0)
}

/// Draw strokes scaled isotropically so the bounding-box height becomes
/// `target_height` pixels (bounding-box width when the strokes are flat).
///
/// The skeleton sits on pixel centres with a margin of `ceil(line_width / 2)`
/// pixels on each side.
pub fn rasterize_strokes(strokes: &StrokeSet, target_height: usize, line_width: Option<f32>) -> Result<GrayImage> {
    if strokes.strokes.is_empty() {
        return Err(ImageError::DegenerateStrokes("no strokes".into()));
    }
    if strokes.strokes.iter().any(Vec::is_empty) {
        return Err(ImageError::DegenerateStrokes("empty polyline".into()));
    }
    if target_height == 0 {
        return Err(ImageError::DegenerateStrokes("target height 0".into()));
    }
    let (x0, y0, x1, y1) = strokes.bbox().expect("non-empty");
    let (bw, bh) = (x1 - x0, y1 - y0);
    let scale = if bh > 0.0 {
        target_height as f32 / bh
    } else if bw > 0.0 {
        target_height as f32 / bw
    } else {
        return Err(ImageError::DegenerateStrokes("all points coincide".into()));
    };
    let lw = line_width.unwrap_or_else(|| default_line_width(target_height));
    let m = (lw / 2.0).ceil();
    let width = (bw * scale).floor() as usize + 2 * m as usize + 1;
    let height = (bh * scale).floor() as usize + 2 * m as usize + 1;
    let mut img = GrayImage::zeros(height, width)?;
    let map = |(x, y): Point| ((x - x0) * scale + m + 0.5, (y - y0) * scale + m + 0.5);
    for s in &strokes.strokes {
        if s.len() == 1 {
            let p = map(s[0]);
            draw_segment(&mut img, p, p, lw);
        }
        for w in s.windows(2) {
            draw_segment(&mut img, map(w[0]), map(w[1]), lw);
        }
    }
    Ok(img)
}

/// Wobble applied when turning glyph dots into pen strokes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandStyle {
    /// Range of the per-formula horizontal slant.
    pub slant: (f32, f32),
    /// Std-dev of per-glyph offsets, as a fraction of the glyph height.
    pub glyph_jitter: f32,
    /// Std-dev of per-dot noise, as a fraction of the dot pitch.
    pub dot_jitter: f32,
    /// Range of per-glyph scale factors.
    pub scale: (f32, f32),
}

impl Default for HandStyle {
    fn default() -> Self {
        Self { slant: (-0.1, 0.25), glyph_jitter: 0.04, dot_jitter: 0.18, scale: (0.88, 1.12) }
    }
}

/// Strokes imitating handwriting of `latex`: every glyph's dot pattern is
/// traced as short pen segments between neighbouring dots, with random
/// slant, per-glyph displacement and per-dot noise.
pub fn pseudo_handwriting<R: Rng + ?Sized>(latex: &str, style: &HandStyle, rng: &mut R) -> Result<StrokeSet> {
    let params = RenderParams { font_size: 32, ..RenderParams::default() };
    let dl = StubRenderer.layout(latex, &params)?;
    let slant = rng.random_range(style.slant.0..=style.slant.1);
    let unit = Normal::new(0.0f32, 1.0).expect("valid normal");
    let mut strokes = Vec::new();
    let skew = |(x, y): Point| (x + slant * (dl.height - y), y);
    for item in &dl.items {
        match *item {
            Item::Glyph { glyph, x, y, w, h, .. } => {
                let s = rng.random_range(style.scale.0..=style.scale.1);
                let (ox, oy) = (unit.sample(rng) * style.glyph_jitter * h, unit.sample(rng) * style.glyph_jitter * h);
                let (pitch_x, pitch_y) = (w / (COLS + 2) as f32 * s, h / (ROWS + 2) as f32 * s);
                let (cx, cy) = (x + w / 2.0, y + h / 2.0);
                let mut pos = [[(0.0f32, 0.0f32); COLS]; ROWS];
                for (r, row) in pos.iter_mut().enumerate() {
                    for (c, p) in row.iter_mut().enumerate() {
                        let px = cx + (c as f32 - 2.0) * pitch_x + ox + unit.sample(rng) * style.dot_jitter * pitch_x;
                        let py = cy + (r as f32 - 3.0) * pitch_y + oy + unit.sample(rng) * style.dot_jitter * pitch_y;
                        *p = skew((px, py));
                    }
                }
                let lit = |r: i64, c: i64| {
                    (0..ROWS as i64).contains(&r) && (0..COLS as i64).contains(&c) && glyph.lit(r as usize, c as usize)
                };
                for r in 0..ROWS as i64 {
                    for c in 0..COLS as i64 {
                        if !lit(r, c) {
                            continue;
                        }
                        let p = pos[r as usize][c as usize];
                        let mut linked = lit(r, c - 1) || lit(r - 1, c) || lit(r - 1, c - 1) || lit(r - 1, c + 1);
                        let mut link = |r2: i64, c2: i64| {
                            strokes.push(vec![p, pos[r2 as usize][c2 as usize]]);
                            linked = true;
                        };
                        if lit(r, c + 1) {
                            link(r, c + 1);
                        }
                        if lit(r + 1, c) {
                            link(r + 1, c);
                        }
                        if lit(r + 1, c + 1) && !lit(r, c + 1) && !lit(r + 1, c) {
                            link(r + 1, c + 1);
                        }
                        if lit(r + 1, c - 1) && !lit(r, c - 1) && !lit(r + 1, c) {
                            link(r + 1, c - 1);
                        }
                        if !linked {
                            strokes.push(vec![p]);
                        }
                    }
                }
            }
            Item::Rule { x0, y0, x1, y1, thickness } => {
                let n = 4;
                let amp = thickness.max(1.0) * 0.8;
                let line = (0..=n)
                    .map(|i| {
                        let t = i as f32 / n as f32;
                        let p = (x0 + t * (x1 - x0) + unit.sample(rng) * amp, y0 + t * (y1 - y0) + unit.sample(rng) * amp);
                        skew(p)
                    })
                    .collect();
                strokes.push(line);
            }
        }
    }
    Ok(StrokeSet::new(strokes))
}
