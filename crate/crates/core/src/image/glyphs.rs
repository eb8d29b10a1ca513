//! The 5×7 dot-matrix glyph table used by the stub renderer.

use std::collections::BTreeMap;
use std::sync::OnceLock;

pub const COLS: usize = 5;
pub const ROWS: usize = 7;

/// Dots of one glyph, `rows[r]` bit `4 - c` set when column `c` is lit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Glyph {
    pub rows: [u8; ROWS],
}

impl Glyph {
    pub fn lit(&self, r: usize, c: usize) -> bool {
        self.rows[r] >> (COLS - 1 - c) & 1 == 1
    }
}

const TABLE: &str = include_str!("../../data/glyphs5x7.txt");

const ALIASES: [(&str, &str); 14] = [
    ("\\to", "\\rightarrow"),
    ("\\prime", "'"),
    ("\\ast", "*"),
    ("\\lt", "<"),
    ("\\gt", ">"),
    ("\\le", "\\leq"),
    ("\\ge", "\\geq"),
    ("\\ne", "\\neq"),
    ("\\varepsilon", "\\epsilon"),
    ("\\vert", "|"),
    ("\\mid", "|"),
    ("\\lbrace", "\\{"),
    ("\\rbrace", "\\}"),
    ("\\colon", ":"),
];

fn parse_table() -> BTreeMap<String, Glyph> {
    let mut map = BTreeMap::new();
    for line in TABLE.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        let name = parts.next().expect("glyph name");
        let mut rows = [0u8; ROWS];
        for row in rows.iter_mut() {
            let bits = parts.next().unwrap_or_else(|| panic!("glyph {name}: missing row"));
            assert_eq!(bits.len(), COLS, "glyph {name}: row width");
            *row = bits.bytes().fold(0, |acc, b| acc << 1 | u8::from(b == b'#'));
        }
        map.insert(name.to_string(), Glyph { rows });
    }
    for (alias, target) in ALIASES {
        let g = map[target];
        map.insert(alias.to_string(), g);
    }
    map
}

pub fn table() -> &'static BTreeMap<String, Glyph> {
    static TABLE: OnceLock<BTreeMap<String, Glyph>> = OnceLock::new();
    TABLE.get_or_init(parse_table)
}

pub fn lookup(name: &str) -> Option<Glyph> {
    table().get(name).copied()
}
