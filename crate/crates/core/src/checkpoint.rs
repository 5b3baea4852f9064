//! Versioned checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "HZCKPT\0\0"
//! version  u32
//! hlen     u64      length of the JSON header in bytes
//! header   hlen bytes of UTF-8 JSON (see `Header`)
//! payload  f32 values of every listed tensor, concatenated in header order
//! ```
//!
//! The header echoes the model and training configs, the step/epoch
//! counters and, per tensor, its group (`gen`, `disc`, `gen.adam_m`, ...),
//! name and shape. Readers accept any version up to `VERSION`; unknown JSON
//! fields are ignored so minor additions stay compatible.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

type Named = Vec<(String, Tensor<f32>)>;

pub const MAGIC: &[u8; 8] = b"HZCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named groups of parameter stores plus free-form JSON metadata.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub groups: Vec<(String, ParamStore<f32>)>,
}

impl Archive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            groups: Vec::new(),
        }
    }

    pub fn push(&mut self, group: &str, store: ParamStore<f32>) {
        self.groups.push((group.to_string(), store));
    }

    pub fn group(&self, name: &str) -> Option<&ParamStore<f32>> {
        self.groups.iter().find(|(g, _)| g == name).map(|(_, s)| s)
    }

    pub fn take_group(&mut self, name: &str) -> Option<ParamStore<f32>> {
        let i = self.groups.iter().position(|(g, _)| g == name)?;
        Some(self.groups.remove(i).1)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        for (group, store) in &self.groups {
            for (name, t) in store.iter() {
                entries.push(TensorEntry {
                    group: group.clone(),
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                });
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = serde_json::to_vec(&Header {
            version: VERSION,
            meta: self.meta.clone(),
            tensors: entries,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(path, reason);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version == 0 || version > VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&format!("header: {e}")))?;
        let mut payload = &body[hlen..];
        let mut groups: Vec<(String, Named)> = Vec::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if payload.len() < 4 * n {
                return Err(bad(&format!("truncated payload at {}/{}", e.group, e.name)));
            }
            let data = payload[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            payload = &payload[4 * n..];
            let t = Tensor::new(e.shape, data)?;
            match groups.last_mut() {
                Some((g, items)) if *g == e.group => items.push((e.name, t)),
                _ => groups.push((e.group, vec![(e.name, t)])),
            }
        }
        if !payload.is_empty() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            meta: header.meta,
            groups: groups
                .into_iter()
                .map(|(g, items)| (g, ParamStore::from_named(items)))
                .collect(),
        })
    }

    /// Writes atomically (temp file + rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
