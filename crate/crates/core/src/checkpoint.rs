//! Binary checkpoint container shared by the seq2seq model and the proxy.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   b"NAPSTEER"
//! header_len u64
//! header     header_len bytes of UTF-8 JSON:
//!            {"format_version": u32, "kind": str, "meta": {...},
//!             "tensors": [{"name": str, "shape": [usize]}, ...]}
//! data       f64 values of every tensor, row-major, in header order
//! ```
//!
//! JSON objects are emitted with sorted keys and floats in shortest
//! round-trip form, so save → load → save reproduces the same bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CheckpointError;
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NAPSTEER";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub format_version: u32,
    pub meta: serde_json::Value,
    pub tensors: ParamSet,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: self.format_version,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let n_values = self.tensors.num_scalars();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * n_values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.tensors.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| CheckpointError::Malformed("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..body])?;
        let mut data = &bytes[body..];
        let mut tensors = ParamSet::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if data.len() < n * 8 {
                return Err(CheckpointError::Malformed(format!("tensor {} truncated", entry.name)));
            }
            let values = data[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[n * 8..];
            let t = Tensor::new(entry.shape, values).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            tensors.insert(entry.name, t);
        }
        if !data.is_empty() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", data.len())));
        }
        Ok(Container {
            kind: header.kind,
            format_version: header.format_version,
            meta: header.meta,
            tensors,
        })
    }

    /// Checks kind and version against what the caller can read.
    pub fn expect(&self, kind: &str, version: u32) -> Result<(), CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::WrongKind {
                expected: kind.into(),
                found: self.kind.clone(),
            });
        }
        if self.format_version != version {
            return Err(CheckpointError::UnsupportedVersion {
                kind: kind.into(),
                version: self.format_version,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
