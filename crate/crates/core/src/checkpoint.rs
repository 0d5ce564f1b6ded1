//! Versioned container for named weight arrays plus a JSON metadata block.
//!
//! Layout: the 16-byte magic, a little-endian `u64` header length, the JSON
//! header (metadata and array shapes), then every array's entries as
//! little-endian `f64` in row-major order.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const MAGIC: &[u8; 16] = b"SECGUARD-CKPT-v1";

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    arrays: Vec<ArrayHeader>,
}

#[derive(Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Array2<f64>)>,
}

impl Archive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push_set(&mut self, prefix: &str, set: &ParamSet) {
        for p in set.iter() {
            self.arrays
                .push((format!("{prefix}{}", p.name), p.value.clone()));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// Copies every array named `prefix + param.name` into `set`, checking shapes.
    pub fn fill_set(&self, prefix: &str, set: &mut ParamSet) -> Result<()> {
        for p in set.iter_mut() {
            let key = format!("{prefix}{}", p.name);
            let arr = self.get(&key).ok_or_else(|| Error::Format {
                what: "checkpoint",
                detail: format!("missing array `{key}`"),
            })?;
            if arr.dim() != p.value.dim() {
                return Err(Error::Format {
                    what: "checkpoint",
                    detail: format!(
                        "array `{key}` has shape {:?}, expected {:?}",
                        arr.dim(),
                        p.value.dim()
                    ),
                });
            }
            p.value.assign(arr);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, a)| ArrayHeader {
                    name: name.clone(),
                    rows: a.nrows(),
                    cols: a.ncols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let n_values: usize = self.arrays.iter().map(|(_, a)| a.len()).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 8 * n_values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, a) in &self.arrays {
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: &str| Error::Format {
            what: "checkpoint",
            detail: detail.to_string(),
        };
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("missing or unsupported magic string"));
        }
        let mut off = MAGIC.len();
        let hlen = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
        off += 8;
        let header: Header = serde_json::from_slice(
            bytes
                .get(off..off + hlen)
                .ok_or_else(|| bad("truncated header"))?,
        )?;
        off += hlen;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for ah in header.arrays {
            let n = ah.rows * ah.cols;
            let raw = bytes
                .get(off..off + 8 * n)
                .ok_or_else(|| bad("truncated array data"))?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += 8 * n;
            let arr = Array2::from_shape_vec((ah.rows, ah.cols), data)
                .map_err(|e| bad(&e.to_string()))?;
            arrays.push((ah.name, arr));
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes after array data"));
        }
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
