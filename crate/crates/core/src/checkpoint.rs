//! Single-file checkpoint archive.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (model kind, config echo, metadata, tensor table), then every
//! tensor as little-endian `f32` in table order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use formula_tensor::{ParamStore, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const MAGIC: &[u8; 8] = b"FGANCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint holds a {found} model, expected {expected}")]
    KindMismatch { expected: String, found: String },
    #[error("checkpoint config does not match: stored {stored}, requested {requested}")]
    ConfigMismatch { stored: String, requested: String },
    #[error("checkpoint has no section {0}")]
    MissingSection(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    section: String,
    name: String,
    buffer: bool,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    config: Value,
    meta: Value,
    tensors: Vec<Entry>,
}

/// A loaded or to-be-saved model archive.
#[derive(Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub meta: Value,
    /// Named parameter stores, e.g. `generator`, `discriminator`, `task`.
    pub sections: BTreeMap<String, ParamStore<f32>>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, config: &impl Serialize) -> Result<Self> {
        Ok(Self { kind: kind.into(), config: serde_json::to_value(config)?, meta: Value::Null, sections: BTreeMap::new() })
    }

    pub fn with_section(mut self, name: impl Into<String>, store: ParamStore<f32>) -> Self {
        self.sections.insert(name.into(), store);
        self
    }

    pub fn with_meta(mut self, meta: Value) -> Self {
        self.meta = meta;
        self
    }

    pub fn section(&self, name: &str) -> Result<&ParamStore<f32>> {
        self.sections.get(name).ok_or_else(|| CheckpointError::MissingSection(name.to_string()))
    }

    pub fn take_section(&mut self, name: &str) -> Result<ParamStore<f32>> {
        self.sections.remove(name).ok_or_else(|| CheckpointError::MissingSection(name.to_string()))
    }

    pub fn check_kind(&self, expected: &str) -> Result<()> {
        if self.kind != expected {
            return Err(CheckpointError::KindMismatch { expected: expected.into(), found: self.kind.clone() });
        }
        Ok(())
    }

    /// Fails unless the stored config equals `requested`.
    pub fn check_config(&self, requested: &impl Serialize) -> Result<()> {
        let requested = serde_json::to_value(requested)?;
        if requested != self.config {
            return Err(CheckpointError::ConfigMismatch { stored: self.config.to_string(), requested: requested.to_string() });
        }
        Ok(())
    }

    pub fn config_as<C: DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    /// Writes to a temporary sibling file, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut payload: Vec<&Tensor<f32>> = Vec::new();
        for (section, store) in &self.sections {
            for (buffer, items) in [(false, store.params().collect::<Vec<_>>()), (true, store.buffers().collect())] {
                for (name, t) in items {
                    tensors.push(Entry { section: section.clone(), name: name.to_string(), buffer, shape: t.shape().to_vec() });
                    payload.push(t);
                }
            }
        }
        let header = serde_json::to_vec(&Header { kind: self.kind.clone(), config: self.config.clone(), meta: self.meta.clone(), tensors })?;
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(&(header.len() as u64).to_le_bytes())?;
            w.write_all(&header)?;
            for t in payload {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::Format(format!("{} lacks the checkpoint magic", path.display())));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(CheckpointError::Format("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let mut data = &body[hlen..];
        let mut sections: BTreeMap<String, ParamStore<f32>> = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if data.len() < 4 * n {
                return Err(CheckpointError::Format(format!("truncated payload at {}/{}", e.section, e.name)));
            }
            let vals = data[..4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            data = &data[4 * n..];
            let t = Tensor::new(&e.shape, vals).map_err(|err| CheckpointError::Format(err.to_string()))?;
            let store = sections.entry(e.section).or_default();
            if e.buffer {
                store.insert_buffer(e.name, t);
            } else {
                store.insert_param(e.name, t);
            }
        }
        if !data.is_empty() {
            return Err(CheckpointError::Format(format!("{} trailing bytes", data.len())));
        }
        Ok(Self { kind: header.kind, config: header.config, meta: header.meta, sections })
    }
}
