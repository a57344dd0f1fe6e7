//! `CLAPEMB1` embedding container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CLAPEMB1" | u32 dim | u32 count | u32 meta_len | meta JSON | count*dim f32
//! ```
//!
//! The metadata block is a compact JSON array of per-row records with keys in
//! sorted order, so writing the same set twice yields identical bytes.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fsio;
use crate::ndcore::Tensor2;

pub const MAGIC: &[u8; 8] = b"CLAPEMB1";
const HEADER_LEN: usize = 8 + 4 + 4 + 4;

/// Label value of rows without a class.
pub const UNLABELED: i64 = -1;

/// Per-row metadata. Field order is alphabetical so serde emits sorted keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_name: Option<String>,
    pub id: String,
    pub label: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl RowMeta {
    pub fn new(id: impl Into<String>, label: i64) -> Self {
        RowMeta {
            class_name: None,
            id: id.into(),
            label,
            text: None,
        }
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(text.into());
        self
    }

    pub fn with_class_name(mut self, name: impl Into<String>) -> Self {
        self.class_name = Some(name.into());
        self
    }
}

/// A named set of fixed-dimension embedding vectors stored as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    data: Vec<f32>,
    meta: Vec<RowMeta>,
}

impl EmbeddingSet {
    /// Builds a set from row-major `data`, validating every invariant.
    pub fn new(dim: usize, data: Vec<f32>, meta: Vec<RowMeta>) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("embedding dimension must be positive"));
        }
        if data.len() != meta.len() * dim {
            return Err(Error::MetaCountMismatch {
                meta: meta.len(),
                count: data.len() / dim,
            });
        }
        let set = EmbeddingSet { dim, data, meta };
        set.validate()?;
        Ok(set)
    }

    /// Builds a set from f64 rows, rounding to f32 storage.
    pub fn from_tensor(rows: &Tensor2, meta: Vec<RowMeta>) -> Result<Self> {
        let data = rows.data().iter().map(|&v| v as f32).collect();
        EmbeddingSet::new(rows.cols(), data, meta)
    }

    fn validate(&self) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    row: i / self.dim,
                    col: i % self.dim,
                });
            }
        }
        let mut seen = HashSet::with_capacity(self.meta.len());
        for m in &self.meta {
            if m.label < UNLABELED {
                return Err(Error::Metadata(format!(
                    "row {:?} has label {} below -1",
                    m.id, m.label
                )));
            }
            if !seen.insert(m.id.as_str()) {
                return Err(Error::DuplicateId(m.id.clone()));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn meta(&self) -> &[RowMeta] {
        &self.meta
    }

    pub fn labels(&self) -> impl Iterator<Item = i64> + '_ {
        self.meta.iter().map(|m| m.label)
    }

    /// All rows widened to f64.
    pub fn to_tensor(&self) -> Tensor2 {
        let data = self.data.iter().map(|&v| v as f64).collect();
        Tensor2::from_vec(self.len(), self.dim, data).expect("shape is consistent by construction")
    }

    /// Gathers the given rows (in order) into an f64 tensor.
    pub fn gather(&self, rows: &[usize]) -> Tensor2 {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend(self.row(r).iter().map(|&v| v as f64));
        }
        Tensor2::from_vec(rows.len(), self.dim, data).expect("shape is consistent by construction")
    }

    /// Number of classes when labeled rows cover exactly `0..n`.
    ///
    /// Fails if any row is unlabeled or a label in `0..max` has no rows.
    pub fn dense_class_count(&self) -> Result<usize> {
        let mut present: Vec<bool> = Vec::new();
        for m in &self.meta {
            if m.label < 0 {
                return Err(invalid(format!("row {:?} is unlabeled", m.id)));
            }
            let l = m.label as usize;
            if l >= present.len() {
                present.resize(l + 1, false);
            }
            present[l] = true;
        }
        if let Some(missing) = present.iter().position(|p| !p) {
            return Err(Error::EmptyClass(missing as i64));
        }
        Ok(present.len())
    }

    /// Canonical byte encoding.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let meta_json = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::Metadata(format!("serialize: {e}")))?;
        let mut out = Vec::with_capacity(HEADER_LEN + meta_json.len() + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&u32_field(self.dim, "dim")?.to_le_bytes());
        out.extend_from_slice(&u32_field(self.len(), "count")?.to_le_bytes());
        out.extend_from_slice(&u32_field(meta_json.len(), "meta_len")?.to_le_bytes());
        out.extend_from_slice(&meta_json);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Truncated {
                what: "magic",
                needed: 8,
                available: bytes.len(),
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
                found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                what: "header",
                needed: HEADER_LEN,
                available: bytes.len(),
            });
        }
        let dim = read_u32(bytes, 8) as usize;
        let count = read_u32(bytes, 12) as usize;
        let meta_len = read_u32(bytes, 16) as usize;
        if dim == 0 {
            return Err(invalid("header declares zero dimension"));
        }
        let meta_end = HEADER_LEN + meta_len;
        if bytes.len() < meta_end {
            return Err(Error::Truncated {
                what: "metadata",
                needed: meta_end,
                available: bytes.len(),
            });
        }
        let meta: Vec<RowMeta> = serde_json::from_slice(&bytes[HEADER_LEN..meta_end])
            .map_err(|e| Error::Metadata(e.to_string()))?;
        if meta.len() != count {
            return Err(Error::MetaCountMismatch {
                meta: meta.len(),
                count,
            });
        }
        let payload_len = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| invalid("payload size overflows"))?;
        let payload = &bytes[meta_end..];
        if payload.len() < payload_len {
            return Err(Error::Truncated {
                what: "payload",
                needed: payload_len,
                available: payload.len(),
            });
        }
        if payload.len() > payload_len {
            return Err(Error::TrailingBytes(payload.len() - payload_len));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        EmbeddingSet::new(dim, data, meta)
    }
}

fn u32_field(v: usize, name: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| invalid(format!("{name} {v} does not fit in u32")))
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

pub fn write_embedding_set(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let bytes = set.to_bytes()?;
    fsio::write_atomic(path, &bytes)
}

pub fn read_embedding_set(path: &Path) -> Result<EmbeddingSet> {
    EmbeddingSet::from_bytes(&fsio::read_all(path)?)
}

/// Rows whose label equals `label`, in original order.
pub fn select_by_label(set: &EmbeddingSet, label: i64) -> EmbeddingSet {
    let mut data = Vec::new();
    let mut meta = Vec::new();
    for (i, m) in set.meta.iter().enumerate() {
        if m.label == label {
            data.extend_from_slice(set.row(i));
            meta.push(m.clone());
        }
    }
    EmbeddingSet {
        dim: set.dim,
        data,
        meta,
    }
}
