//! Versioned, self-describing binary container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes   "HGRLARC\0"
//! format   u32       FORMAT_VERSION
//! hlen     u64       length of the JSON header
//! header   hlen      {"kind", "version", "meta", "tensors": [{name, rows, cols}]}
//! payload            f64 values of every tensor, row-major, in header order
//! digest   32 bytes  SHA-256 of everything above
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::Matrix;

const MAGIC: &[u8; 8] = b"HGRLARC\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: String,
    /// Schema version of `kind`, checked by readers.
    pub version: u32,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Matrix)>,
}

impl Archive {
    pub fn new(kind: impl Into<String>, version: u32, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            version,
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.push((name.into(), value));
    }

    pub fn tensor(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Archive(format!("missing tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            version: self.version,
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, m)| TensorEntry {
                    name: name.clone(),
                    rows: m.nrows(),
                    cols: m.ncols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("archive header serializes");
        let mut out = Vec::with_capacity(header.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, m) in &self.tensors {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Archive("not an archive (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let actual = Sha256::digest(body);
        if actual.as_slice() != digest {
            return Err(Error::HashMismatch {
                expected: hex::encode(digest),
                found: hex::encode(actual),
            });
        }
        let format = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if format != FORMAT_VERSION {
            return Err(Error::Archive(format!(
                "unsupported archive format {format}, expected {FORMAT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Archive("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])
            .map_err(|e| Error::Archive(format!("bad header: {e}")))?;
        let mut offset = header_end;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n = entry.rows * entry.cols;
            let end = offset + n * 8;
            if end > body.len() {
                return Err(Error::Archive(format!("truncated tensor {:?}", entry.name)));
            }
            let data: Vec<f64> = body[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset = end;
            let m = Matrix::from_shape_vec((entry.rows, entry.cols), data)
                .map_err(|e| Error::Archive(e.to_string()))?;
            tensors.push((entry.name, m));
        }
        if offset != body.len() {
            return Err(Error::Archive("trailing bytes after payload".into()));
        }
        Ok(Self {
            kind: header.kind,
            version: header.version,
            meta: header.meta,
            tensors,
        })
    }

    /// Hex SHA-256 digest stored in the archive trailer.
    pub fn content_hash(&self) -> String {
        let bytes = self.to_bytes();
        hex::encode(&bytes[bytes.len() - 32..])
    }

    pub fn write(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        // Write beside the target and rename so readers never see a torn file.
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(hex::encode(&bytes[bytes.len() - 32..]))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless the archive has the given kind and schema version.
    pub fn expect_kind(&self, kind: &str, version: u32) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Archive(format!(
                "expected a {kind:?} archive, found {:?}",
                self.kind
            )));
        }
        if self.version != version {
            return Err(Error::Archive(format!(
                "{kind} schema version {} does not match supported version {version}",
                self.version
            )));
        }
        Ok(())
    }
}
