//! LaTeX formula tokenization, normalization, vocabularies and corpus filters.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("unbalanced braces at byte {position}")]
    UnbalancedBraces { position: usize },
    #[error("malformed command at byte {position}")]
    MalformedCommand { position: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid token {0:?}")]
    InvalidToken(String),
    #[error("vocabulary file: {0}")]
    BadVocabulary(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Commands that only insert horizontal space.
pub const SPACING_COMMANDS: [&str; 7] = ["\\,", "\\;", "\\:", "\\!", "\\quad", "\\qquad", "~"];

/// One lexical unit of a formula: a command such as `\frac`, a brace, or a character.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Token(String);

impl Token {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if is_valid_token(&text) {
            Ok(Self(text))
        } else {
            Err(CorpusError::InvalidToken(text))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// `\` followed by one or more letters.
    pub fn is_letter_command(&self) -> bool {
        self.0.len() > 1 && self.0.starts_with('\\') && self.0[1..].bytes().all(|b| b.is_ascii_alphabetic())
    }

    pub fn is_spacing(&self) -> bool {
        SPACING_COMMANDS.contains(&self.0.as_str())
    }
}

fn is_valid_token(text: &str) -> bool {
    let mut chars = text.chars();
    match (chars.next(), chars.next()) {
        (None, _) => false,
        (Some(c), None) => !c.is_whitespace(),
        (Some('\\'), Some(second)) => {
            if second.is_ascii_alphabetic() {
                text[1..].bytes().all(|b| b.is_ascii_alphabetic())
            } else {
                !second.is_whitespace() && chars.next().is_none()
            }
        }
        _ => false,
    }
}

impl TryFrom<String> for Token {
    type Error = CorpusError;

    fn try_from(s: String) -> Result<Self> {
        Token::new(s)
    }
}

impl From<Token> for String {
    fn from(t: Token) -> String {
        t.0
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Ordered tokens of one formula.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(Vec<Token>);

impl TokenSequence {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self(tokens)
    }

    /// Build from token texts, validating each one.
    pub fn parse_tokens<S: AsRef<str>>(texts: &[S]) -> Result<Self> {
        texts.iter().map(|t| Token::new(t.as_ref())).collect::<Result<Vec<_>>>().map(Self)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Token> {
        self.0.iter()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.0.iter().map(Token::as_str).collect()
    }
}

impl FromIterator<Token> for TokenSequence {
    fn from_iter<I: IntoIterator<Item = Token>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a TokenSequence {
    type Item = &'a Token;
    type IntoIter = std::slice::Iter<'a, Token>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Split a formula into tokens.
///
/// A token is `\` plus a maximal run of ASCII letters, `\` plus one other
/// non-whitespace character, or any single non-whitespace character.
/// Whitespace only separates tokens. Braces must balance.
pub fn tokenize(latex: &str) -> Result<TokenSequence> {
    let mut tokens = Vec::new();
    let mut open: Vec<usize> = Vec::new();
    let mut iter = latex.char_indices().peekable();
    while let Some((pos, c)) = iter.next() {
        if c.is_whitespace() {
            continue;
        }
        if c == '\\' {
            match iter.peek().copied() {
                Some((_, n)) if n.is_ascii_alphabetic() => {
                    let mut end = pos + 1;
                    while let Some(&(i, n)) = iter.peek() {
                        if !n.is_ascii_alphabetic() {
                            break;
                        }
                        end = i + n.len_utf8();
                        iter.next();
                    }
                    tokens.push(Token(latex[pos..end].to_string()));
                }
                Some((i, n)) if !n.is_whitespace() => {
                    iter.next();
                    tokens.push(Token(latex[pos..i + n.len_utf8()].to_string()));
                }
                _ => return Err(CorpusError::MalformedCommand { position: pos }),
            }
            continue;
        }
        match c {
            '{' => open.push(pos),
            '}' => {
                if open.pop().is_none() {
                    return Err(CorpusError::UnbalancedBraces { position: pos });
                }
            }
            _ => {}
        }
        tokens.push(Token(c.to_string()));
    }
    if let Some(&pos) = open.last() {
        return Err(CorpusError::UnbalancedBraces { position: pos });
    }
    Ok(TokenSequence(tokens))
}

/// Drop spacing commands, keeping everything else in order.
pub fn normalize(seq: &TokenSequence) -> TokenSequence {
    seq.iter().filter(|t| !t.is_spacing()).cloned().collect()
}

/// Tokenize and normalize in one go.
pub fn tokenize_normalized(latex: &str) -> Result<TokenSequence> {
    tokenize(latex).map(|s| normalize(&s))
}

/// Join tokens back into LaTeX source. A space is inserted only where a
/// letter command would otherwise swallow the following letter.
pub fn detokenize(tokens: &[Token]) -> String {
    let mut out = String::new();
    let mut prev_letter_cmd = false;
    for t in tokens {
        if prev_letter_cmd && t.0.starts_with(|c: char| c.is_ascii_alphabetic()) {
            out.push(' ');
        }
        out.push_str(&t.0);
        prev_letter_cmd = t.is_letter_command();
    }
    out
}

/// Which of the two image domains a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainLabel {
    Rendered,
    Handwritten,
}

impl DomainLabel {
    pub const ALL: [DomainLabel; 2] = [DomainLabel::Rendered, DomainLabel::Handwritten];

    pub fn index(self) -> usize {
        match self {
            DomainLabel::Rendered => 0,
            DomainLabel::Handwritten => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn opposite(self) -> Self {
        match self {
            DomainLabel::Rendered => DomainLabel::Handwritten,
            DomainLabel::Handwritten => DomainLabel::Rendered,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DomainLabel::Rendered => "rendered",
            DomainLabel::Handwritten => "handwritten",
        }
    }
}

impl std::str::FromStr for DomainLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rendered" => Ok(DomainLabel::Rendered),
            "handwritten" => Ok(DomainLabel::Handwritten),
            other => Err(format!("unknown domain {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormulaRecord {
    pub id: String,
    pub source_latex: String,
    pub tokens: TokenSequence,
    pub domain: DomainLabel,
    pub image_path: Option<String>,
}

impl FormulaRecord {
    /// Tokenizes and normalizes `latex`.
    pub fn new(id: impl Into<String>, latex: impl Into<String>, domain: DomainLabel) -> Result<Self> {
        let source_latex = latex.into();
        let tokens = tokenize_normalized(&source_latex)?;
        Ok(Self { id: id.into(), source_latex, tokens, domain, image_path: None })
    }

    pub fn with_image(mut self, path: impl Into<String>) -> Self {
        self.image_path = Some(path.into());
        self
    }
}

/// Token ↔ id map with four reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_text: Vec<String>,
    text_to_id: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const SOS: usize = 1;
    pub const EOS: usize = 2;
    pub const UNK: usize = 3;
    pub const SPECIALS: [&'static str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];

    /// Specials followed by `tokens` in lexicographic order, duplicates removed.
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a Token>) -> Self {
        let set: BTreeSet<&str> = tokens.into_iter().map(Token::as_str).collect();
        let id_to_text: Vec<String> =
            Self::SPECIALS.iter().map(|s| s.to_string()).chain(set.into_iter().map(String::from)).collect();
        let text_to_id = id_to_text.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { id_to_text, text_to_id }
    }

    pub fn len(&self) -> usize {
        self.id_to_text.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token_to_id(&self, token: &str) -> Option<usize> {
        self.text_to_id.get(token).copied()
    }

    pub fn id_to_token(&self, id: usize) -> Option<&str> {
        self.id_to_text.get(id).map(String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < 4
    }

    /// Ids of `seq`, unknown tokens mapped to `UNK`. No start/end markers.
    pub fn encode(&self, seq: &TokenSequence) -> Vec<usize> {
        seq.iter().map(|t| self.token_to_id(t.as_str()).unwrap_or(Self::UNK)).collect()
    }

    /// Tokens for `ids`, stopping at the first `EOS` and skipping other specials.
    pub fn decode(&self, ids: &[usize]) -> TokenSequence {
        ids.iter()
            .take_while(|&&i| i != Self::EOS)
            .filter(|&&i| !Self::is_special(i))
            .filter_map(|&i| self.id_to_token(i))
            .map(|t| Token(t.to_string()))
            .collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_text
    }

    pub fn to_text(&self) -> String {
        let mut s = self.id_to_text.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < 4 || lines[..4] != Self::SPECIALS {
            return Err(CorpusError::BadVocabulary("first four lines must be the special tokens".into()));
        }
        let mut text_to_id = BTreeMap::new();
        for (i, l) in lines.iter().enumerate() {
            if i >= 4 {
                Token::new(*l)?;
            }
            if text_to_id.insert(l.to_string(), i).is_some() {
                return Err(CorpusError::BadVocabulary(format!("duplicate entry {l:?}")));
            }
        }
        Ok(Self { id_to_text: lines.iter().map(|s| s.to_string()).collect(), text_to_id })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

pub fn build_vocabulary(corpus: &[FormulaRecord]) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(Vocabulary::from_tokens(corpus.iter().flat_map(|r| r.tokens.iter())))
}

/// Keep records with at most `max_tokens` tokens whose tokens all lie in
/// `whitelist` (when given). Order is preserved.
pub fn filter_corpus(records: &[FormulaRecord], max_tokens: usize, whitelist: Option<&BTreeSet<Token>>) -> Vec<FormulaRecord> {
    records
        .iter()
        .filter(|r| r.tokens.len() <= max_tokens)
        .filter(|r| whitelist.is_none_or(|w| r.tokens.iter().all(|t| w.contains(t))))
        .cloned()
        .collect()
}

/// Commands whose presence excludes a formula (positioning and text-style
/// commands the renderer cannot typeset).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandExclusion {
    pub commands: BTreeSet<String>,
}

impl Default for CommandExclusion {
    fn default() -> Self {
        let commands = [
            "\\raisebox", "\\hspace", "\\vspace", "\\kern", "\\hskip", "\\vskip", "\\put", "\\makebox", "\\framebox",
            "\\textsc", "\\textsl", "\\em", "\\it", "\\bf", "\\rm", "\\sc", "\\sl", "\\tt", "\\sf", "\\cal",
            "\\underset", "\\overset", "\\stackrel", "\\label", "\\nonumber", "\\tag", "\\\\",
        ];
        Self { commands: commands.iter().map(|s| s.to_string()).collect() }
    }
}

impl CommandExclusion {
    pub fn none() -> Self {
        Self { commands: BTreeSet::new() }
    }

    pub fn excludes(&self, seq: &TokenSequence) -> bool {
        seq.iter().any(|t| self.commands.contains(t.as_str()))
    }
}

/// Outcome of reading a one-formula-per-line corpus.
#[derive(Debug, Default)]
pub struct LoadedCorpus {
    pub records: Vec<FormulaRecord>,
    /// `(line number, reason)` for every line that was dropped.
    pub rejected: Vec<(usize, String)>,
}

/// Parse corpus text. Blank lines are skipped; lines that fail to tokenize or
/// hit the exclusion list are reported in `rejected`. Ids are `{prefix}{line:05}`.
pub fn parse_corpus(text: &str, prefix: &str, domain: DomainLabel, exclusion: &CommandExclusion) -> LoadedCorpus {
    let mut out = LoadedCorpus::default();
    for (i, line) in text.lines().enumerate() {
        let latex = line.trim();
        if latex.is_empty() {
            continue;
        }
        match FormulaRecord::new(format!("{prefix}{:05}", i + 1), latex, domain) {
            Ok(r) if exclusion.excludes(&r.tokens) => out.rejected.push((i + 1, "excluded command".into())),
            Ok(r) if r.tokens.is_empty() => out.rejected.push((i + 1, "no tokens".into())),
            Ok(r) => out.records.push(r),
            Err(e) => out.rejected.push((i + 1, e.to_string())),
        }
    }
    out
}

pub fn read_corpus_file(path: &Path, domain: DomainLabel, exclusion: &CommandExclusion) -> Result<LoadedCorpus> {
    let text = std::fs::read_to_string(path)?;
    let prefix = path.file_stem().and_then(|s| s.to_str()).unwrap_or("f");
    Ok(parse_corpus(&text, &format!("{prefix}-"), domain, exclusion))
}

/// Sample corpus shipped with the crate (one formula per line).
pub const BUNDLED_CORPUS: &str = include_str!("../data/formulas.txt");

pub fn bundled_corpus() -> Vec<FormulaRecord> {
    parse_corpus(BUNDLED_CORPUS, "bundled-", DomainLabel::Rendered, &CommandExclusion::default()).records
}
