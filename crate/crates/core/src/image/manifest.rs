//! `manifest.jsonl` + `vocab.txt` dataset directories.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ImageError, Result};
use crate::corpus::{tokenize_normalized, DomainLabel, FormulaRecord, Vocabulary};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub id: String,
    pub latex: String,
    pub token_ids: Vec<usize>,
    pub domain: DomainLabel,
    /// File name relative to the dataset directory.
    pub image: Option<String>,
    pub height: Option<usize>,
    pub width: Option<usize>,
}

fn dims(path: &Path) -> Result<(usize, usize)> {
    if !path.exists() {
        return Err(ImageError::MissingImage(path.to_path_buf()));
    }
    let (w, h) = ::image::image_dimensions(path)?;
    Ok((h as usize, w as usize))
}

/// Write `records` with ids from `vocab`. Every referenced image must exist.
pub fn write_manifest(dir: &Path, records: &[FormulaRecord], vocab: &Vocabulary) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    vocab.write(&dir.join(VOCAB_FILE)).map_err(ImageError::Corpus)?;
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    {
        let mut out = BufWriter::new(File::create(&tmp)?);
        for r in records {
            let (height, width) = match &r.image_path {
                Some(p) => {
                    let (h, w) = dims(&dir.join(p))?;
                    (Some(h), Some(w))
                }
                None => (None, None),
            };
            let row = ManifestRow {
                id: r.id.clone(),
                latex: r.source_latex.clone(),
                token_ids: vocab.encode(&r.tokens),
                domain: r.domain,
                image: r.image_path.clone(),
                height,
                width,
            };
            serde_json::to_writer(&mut out, &row).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
    }
    std::fs::rename(&tmp, dir.join(MANIFEST_FILE))?;
    Ok(())
}

/// Raw rows, without re-deriving tokens or touching images.
pub fn read_manifest_rows(dir: &Path) -> Result<Vec<ManifestRow>> {
    let file = File::open(dir.join(MANIFEST_FILE))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line)
            .map_err(|e| ImageError::CorruptManifest { line: i + 1, reason: e.to_string() })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Read a dataset directory. Tokens are re-derived from each row's LaTeX and
/// must agree with the stored ids. With `strict`, referenced images must
/// exist and match the recorded size.
pub fn read_manifest(dir: &Path, strict: bool) -> Result<(Vec<FormulaRecord>, Vocabulary)> {
    let vocab = Vocabulary::read(&dir.join(VOCAB_FILE))?;
    let mut records = Vec::new();
    for (i, row) in read_manifest_rows(dir)?.into_iter().enumerate() {
        let corrupt = |reason: String| ImageError::CorruptManifest { line: i + 1, reason };
        let tokens = tokenize_normalized(&row.latex).map_err(|e| corrupt(e.to_string()))?;
        if vocab.encode(&tokens) != row.token_ids {
            return Err(corrupt(format!("token ids of {} disagree with its latex", row.id)));
        }
        if let (true, Some(img)) = (strict, &row.image) {
            let (h, w) = dims(&dir.join(img))?;
            if (Some(h), Some(w)) != (row.height, row.width) {
                return Err(corrupt(format!("{img} is {h}x{w}, manifest says {:?}x{:?}", row.height, row.width)));
            }
        }
        records.push(FormulaRecord { id: row.id, source_latex: row.latex, tokens, domain: row.domain, image_path: row.image });
    }
    Ok((records, vocab))
}
