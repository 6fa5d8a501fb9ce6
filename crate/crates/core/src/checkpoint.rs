//! Versioned tensor archives used for every checkpoint kind.
//!
//! Layout: `b"FGCK"`, `u32` version, `u64` header length, JSON header,
//! then each tensor's values as little-endian scalars in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;

pub const MAGIC: &[u8; 4] = b"FGCK";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    kind: String,
    meta: Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug)]
pub struct Archive<T> {
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<(String, Mat<T>)>,
}

impl<T: Scalar> Archive<T> {
    pub fn new(kind: impl Into<String>, meta: Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, m: Mat<T>) {
        self.tensors.push((name.into(), m));
    }

    pub fn get(&self, name: &str) -> Option<&Mat<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// All tensors whose name starts with `prefix`, prefix stripped, in order.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Mat<T>)> {
        self.tensors
            .iter()
            .filter_map(|(n, m)| n.strip_prefix(prefix).map(|s| (s.to_string(), m.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: VERSION,
            dtype: T::DTYPE.to_string(),
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, m)| Entry {
                    name: n.clone(),
                    rows: m.rows,
                    cols: m.cols,
                })
                .collect(),
        };
        let h = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        for (_, m) in &self.tensors {
            out.extend_from_slice(&T::to_le_bytes_vec(&m.data));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: &str| Error::Format {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing FGCK magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.dtype != T::DTYPE {
            return Err(bad(&format!("dtype {} but {} requested", header.dtype, T::DTYPE)));
        }
        let width = std::mem::size_of::<T>();
        let mut off = 16 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n = e.rows * e.cols * width;
            let chunk = bytes.get(off..off + n).ok_or_else(|| bad("truncated tensor data"))?;
            tensors.push((e.name, Mat::from_vec(e.rows, e.cols, T::from_le_bytes_slice(chunk))));
            off += n;
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
        }
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Hex SHA-256 of a file's contents.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
