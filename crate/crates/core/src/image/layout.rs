//! Box layout of a token sequence into positioned glyphs and rules.
//!
//! Supports horizontal concatenation, `^`/`_` scripts, `\frac`, `\sqrt`,
//! `\left`/`\right` delimiters, font switches and spacing commands. Anything
//! else without a glyph is rejected.

use crate::corpus::Token;

use super::glyphs::{self, Glyph};
use super::render::Font;

/// Drawing style of a glyph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Style {
    pub bold: bool,
    /// Horizontal shift per unit of height above the baseline.
    pub slant: f32,
    /// Cell width relative to the font size.
    pub width: f32,
}

impl Style {
    pub fn for_font(font: Font) -> Self {
        let plain = Style { bold: false, slant: 0.0, width: 1.0 };
        match font {
            Font::MathRm | Font::TextStyle => plain,
            Font::MathNormal => Style { slant: 0.15, ..plain },
            Font::MathIt => Style { slant: 0.3, ..plain },
            Font::MathBf => Style { bold: true, ..plain },
            Font::MathSf => Style { width: 0.8, ..plain },
            Font::MathTt => Style { width: 1.2, ..plain },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Item {
    /// Glyph cell with top-left corner `(x, y)` and size `w × h` pixels.
    Glyph { glyph: Glyph, x: f32, y: f32, w: f32, h: f32, style: Style },
    /// Straight segment drawn with the given thickness.
    Rule { x0: f32, y0: f32, x1: f32, y1: f32, thickness: f32 },
}

impl Item {
    fn shifted(&self, dx: f32, dy: f32) -> Item {
        match *self {
            Item::Glyph { glyph, x, y, w, h, style } => Item::Glyph { glyph, x: x + dx, y: y + dy, w, h, style },
            Item::Rule { x0, y0, x1, y1, thickness } => {
                Item::Rule { x0: x0 + dx, y0: y0 + dy, x1: x1 + dx, y1: y1 + dy, thickness }
            }
        }
    }
}

/// Items positioned relative to a baseline at `y = 0`, left edge `x = 0`.
#[derive(Debug, Clone, Default)]
struct LBox {
    items: Vec<Item>,
    width: f32,
    ascent: f32,
    descent: f32,
}

impl LBox {
    fn append(&mut self, other: LBox, dy: f32) {
        let dx = self.width;
        self.items.extend(other.items.iter().map(|it| it.shifted(dx, dy)));
        self.width += other.width;
        self.ascent = self.ascent.max(other.ascent - dy);
        self.descent = self.descent.max(other.descent + dy);
    }

    fn place(&mut self, other: &LBox, dx: f32, dy: f32) {
        self.items.extend(other.items.iter().map(|it| it.shifted(dx, dy)));
        self.width = self.width.max(dx + other.width);
        self.ascent = self.ascent.max(other.ascent - dy);
        self.descent = self.descent.max(other.descent + dy);
    }
}

/// A laid-out formula with the origin at the top-left of its bounding box.
#[derive(Debug, Clone)]
pub struct DisplayList {
    pub items: Vec<Item>,
    pub width: f32,
    pub height: f32,
}

#[derive(Debug, Clone)]
enum Node {
    Glyph(Glyph),
    Row(Vec<Node>),
    Frac(Box<Node>, Box<Node>),
    Sqrt(Box<Node>),
    Script { base: Box<Node>, sup: Option<Box<Node>>, sub: Option<Box<Node>> },
    Styled(Font, Box<Node>),
    Space(f32),
}

const FONT_COMMANDS: [(&str, Font); 6] = [
    ("\\mathrm", Font::MathRm),
    ("\\mathit", Font::MathIt),
    ("\\mathbf", Font::MathBf),
    ("\\mathsf", Font::MathSf),
    ("\\mathtt", Font::MathTt),
    ("\\mathnormal", Font::MathNormal),
];

const FUNCTION_WORDS: [&str; 14] =
    ["sin", "cos", "tan", "cot", "sec", "csc", "log", "ln", "exp", "lim", "max", "min", "det", "arg"];

fn space_width(cmd: &str) -> Option<f32> {
    Some(match cmd {
        "\\," => 0.17,
        "\\:" => 0.22,
        "\\;" => 0.28,
        "\\!" => 0.0,
        "\\quad" => 1.0,
        "\\qquad" => 2.0,
        "~" => 0.33,
        _ => return None,
    })
}

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a str> {
        self.tokens.get(self.pos).map(Token::as_str)
    }

    fn next(&mut self) -> Option<&'a str> {
        let t = self.peek();
        self.pos += 1;
        t
    }

    fn row(&mut self, closing: bool) -> Result<Node, String> {
        let mut nodes = Vec::new();
        loop {
            match self.peek() {
                None if closing => return Err("missing '}'".into()),
                None => break,
                Some("}") if closing => {
                    self.pos += 1;
                    break;
                }
                Some("}") => return Err("unexpected '}'".into()),
                Some(_) => {}
            }
            let node = self.scripted()?;
            nodes.push(node);
        }
        Ok(Node::Row(nodes))
    }

    fn scripted(&mut self) -> Result<Node, String> {
        let base = match self.peek() {
            Some("^") | Some("_") => Node::Row(Vec::new()),
            _ => self.atom()?,
        };
        let (mut sup, mut sub) = (None, None);
        while let Some(op @ ("^" | "_")) = self.peek() {
            self.pos += 1;
            let arg = Box::new(self.argument()?);
            let slot = if op == "^" { &mut sup } else { &mut sub };
            if slot.replace(arg).is_some() {
                return Err(format!("double {op}"));
            }
        }
        if sup.is_none() && sub.is_none() {
            Ok(base)
        } else {
            Ok(Node::Script { base: Box::new(base), sup, sub })
        }
    }

    fn argument(&mut self) -> Result<Node, String> {
        match self.peek() {
            None => Err("missing argument".into()),
            Some("^" | "_" | "}") => Err("missing argument".into()),
            _ => self.atom(),
        }
    }

    fn atom(&mut self) -> Result<Node, String> {
        let tok = self.next().ok_or("unexpected end")?;
        match tok {
            "{" => self.row(true),
            "\\frac" => {
                let num = self.argument()?;
                let den = self.argument()?;
                Ok(Node::Frac(Box::new(num), Box::new(den)))
            }
            "\\sqrt" => {
                if self.peek() == Some("[") {
                    return Err("\\sqrt with index is not supported".into());
                }
                Ok(Node::Sqrt(Box::new(self.argument()?)))
            }
            "\\left" | "\\right" => match self.next() {
                Some(".") => Ok(Node::Row(Vec::new())),
                Some(d) => glyph_node(d),
                None => Err(format!("{tok} without delimiter")),
            },
            "\\textstyle" | "\\displaystyle" => Ok(Node::Row(Vec::new())),
            _ => {
                if let Some(&(_, font)) = FONT_COMMANDS.iter().find(|(c, _)| *c == tok) {
                    return Ok(Node::Styled(font, Box::new(self.argument()?)));
                }
                if let Some(w) = space_width(tok) {
                    return Ok(Node::Space(w));
                }
                if let Some(word) = tok.strip_prefix('\\').filter(|w| FUNCTION_WORDS.contains(w)) {
                    let letters = word.chars().map(|c| glyph_node(&c.to_string())).collect::<Result<_, _>>()?;
                    return Ok(Node::Styled(Font::MathRm, Box::new(Node::Row(letters))));
                }
                glyph_node(tok)
            }
        }
    }
}

fn glyph_node(name: &str) -> Result<Node, String> {
    glyphs::lookup(name).map(Node::Glyph).ok_or_else(|| format!("unsupported token {name:?}"))
}

struct Metrics {
    size: f32,
}

impl Metrics {
    fn rule(&self) -> f32 {
        (self.size / 12.0).round().max(1.0)
    }

    fn gap(&self) -> f32 {
        (self.size / 8.0).round().max(1.0)
    }

    fn script(&self) -> Metrics {
        Metrics { size: (self.size * 0.7).round().max(6.0) }
    }
}

fn layout_node(node: &Node, m: &Metrics, style: Style) -> LBox {
    let s = m.size;
    match node {
        Node::Glyph(g) => {
            let w = (s * style.width).round();
            let item = Item::Glyph { glyph: *g, x: 0.0, y: -s, w, h: s, style };
            LBox { items: vec![item], width: w, ascent: s, descent: 0.0 }
        }
        Node::Row(nodes) => {
            let mut b = LBox::default();
            for n in nodes {
                b.append(layout_node(n, m, style), 0.0);
            }
            b
        }
        Node::Space(em) => LBox { items: Vec::new(), width: (em * s).round(), ascent: 0.0, descent: 0.0 },
        Node::Styled(font, inner) => layout_node(inner, m, Style::for_font(*font)),
        Node::Script { base, sup, sub } => {
            let mut b = layout_node(base, m, style);
            let sm = m.script();
            let x = b.width;
            if let Some(sup) = sup {
                let sb = layout_node(sup, &sm, style);
                b.place(&sb, x, -(0.45 * s).round());
            }
            if let Some(sub) = sub {
                let sb = layout_node(sub, &sm, style);
                b.place(&sb, x, (0.25 * s).round());
            }
            b
        }
        Node::Frac(num, den) => {
            let (t, g) = (m.rule(), m.gap());
            let nb = layout_node(num, m, style);
            let db = layout_node(den, m, style);
            let width = nb.width.max(db.width) + 2.0 * g;
            let bar_top = -(s / 2.0).round() - (t / 2.0).floor();
            let mut b = LBox { items: Vec::new(), width, ascent: 0.0, descent: 0.0 };
            b.place(&nb, ((width - nb.width) / 2.0).floor(), bar_top - g - nb.descent);
            b.place(&db, ((width - db.width) / 2.0).floor(), bar_top + t + g + db.ascent);
            let yc = bar_top + t / 2.0;
            b.items.push(Item::Rule { x0: 0.0, y0: yc, x1: width, y1: yc, thickness: t });
            b.ascent = b.ascent.max(-bar_top);
            b
        }
        Node::Sqrt(body) => {
            let (t, g) = (m.rule(), m.gap());
            let inner = layout_node(body, m, style);
            let r = (0.6 * s).round();
            let top = -(inner.ascent + g + t);
            let bottom = inner.descent;
            let yc = top + t / 2.0;
            let mut b = LBox { items: Vec::new(), width: 0.0, ascent: -top, descent: bottom };
            b.place(&inner, r, 0.0);
            b.width += g;
            let tick = Item::Rule { x0: t / 2.0, y0: -0.35 * s, x1: 0.4 * r, y1: bottom - t / 2.0, thickness: t };
            let rise = Item::Rule { x0: 0.4 * r, y0: bottom - t / 2.0, x1: r - t / 2.0, y1: yc, thickness: t };
            let bar = Item::Rule { x0: r - t / 2.0, y0: yc, x1: b.width, y1: yc, thickness: t };
            b.items.extend([tick, rise, bar]);
            b
        }
    }
}

/// Lay out `tokens` at `font_size` pixels in `font`.
pub fn layout(tokens: &[Token], font_size: u32, font: Font) -> Result<DisplayList, String> {
    let mut parser = Parser { tokens, pos: 0 };
    let tree = parser.row(false)?;
    let m = Metrics { size: font_size as f32 };
    let b = layout_node(&tree, &m, Style::for_font(font));
    if b.items.is_empty() {
        return Err("nothing to draw".into());
    }
    let dy = b.ascent.ceil();
    let items = b.items.iter().map(|it| it.shifted(0.0, dy)).collect();
    Ok(DisplayList { items, width: b.width.ceil().max(1.0), height: (dy + b.descent.ceil()).max(1.0) })
}
