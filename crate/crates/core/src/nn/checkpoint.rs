//! Versioned binary checkpoint container.
//!
//! Layout: `b"PTCK"`, `u32` version, `u64` header length, JSON header
//! (metadata map plus a tensor table of name/shape/offset), then all tensor
//! data as little-endian `f64`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: BTreeMap<String, Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Default)]
pub struct CheckpointWriter {
    meta: BTreeMap<String, Value>,
    tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl CheckpointWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: Value) {
        self.meta.insert(key.to_string(), value);
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((name.to_string(), shape.to_vec(), data.to_vec()));
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, shape, data)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                };
                offset += data.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            version: CHECKPOINT_VERSION,
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, data) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Writes through a temporary file and renames it into place.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::util::write_atomic(path.as_ref(), &self.to_bytes()?)
    }
}

#[derive(Debug)]
pub struct Checkpoint {
    meta: BTreeMap<String, Value>,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
        let payload = &bytes[header_end..];
        if !payload.len().is_multiple_of(8) {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let len: usize = e.shape.iter().product();
            let data = values
                .get(e.offset..e.offset + len)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past payload", e.name)))?
                .to_vec();
            tensors.insert(e.name, (e.shape, data));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn meta(&self, key: &str) -> Option<&Value> {
        self.meta.get(key)
    }

    /// Returns the named tensor, rejecting any shape other than `shape`.
    pub fn tensor(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let (s, data) = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if s != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {s:?}, expected {shape:?}"
            )));
        }
        Ok(data.clone())
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }
}
