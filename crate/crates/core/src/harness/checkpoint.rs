//! Versioned container of named little-endian arrays.
//!
//! Layout: 8-byte magic, `u32` version, `u64` manifest length, the JSON
//! manifest, then the payload. Manifest offsets are relative to the start of
//! the payload and arrays are stored back to back in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DPAPCKPT";
pub const VERSION: u32 = 1;
const PREFIX: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NamedArray {
    pub name: String,
    /// `f32`, `f64`, `u8` or `u64`.
    pub dtype: String,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

fn dtype_width(dtype: &str) -> Option<usize> {
    match dtype {
        "u8" => Some(1),
        "f32" => Some(4),
        "f64" | "u64" => Some(8),
        _ => None,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    meta: serde_json::Value,
    arrays: Vec<Entry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// Free-form JSON carried in the manifest.
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint {
            meta,
            arrays: Vec::new(),
        }
    }

    fn push(&mut self, name: String, dtype: &str, shape: Vec<usize>, bytes: Vec<u8>) {
        debug_assert!(self.find(&name).is_none(), "duplicate array {name}");
        self.arrays.push(NamedArray {
            name,
            dtype: dtype.to_string(),
            shape,
            bytes,
        });
    }

    pub fn push_tensor<S: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<S>) {
        self.push_scalars(name, t.shape().to_vec(), t.data());
    }

    pub fn push_scalars<S: Scalar>(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[S]) {
        let mut bytes = Vec::with_capacity(data.len() * S::WIDTH);
        data.iter().for_each(|v| v.write_le(&mut bytes));
        self.push(name.into(), S::DTYPE, shape, bytes);
    }

    pub fn push_bools(&mut self, name: impl Into<String>, data: &[bool]) {
        let bytes = data.iter().map(|&b| u8::from(b)).collect();
        self.push(name.into(), "u8", vec![data.len()], bytes);
    }

    pub fn push_u64s(&mut self, name: impl Into<String>, data: &[u64]) {
        let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name.into(), "u64", vec![data.len()], bytes);
    }

    pub fn find(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    fn expect(&self, name: &str, dtype: &str) -> Result<&NamedArray> {
        let a = self
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
        if a.dtype != dtype {
            return Err(Error::Checkpoint(format!(
                "array `{name}` has dtype {}, expected {dtype}",
                a.dtype
            )));
        }
        Ok(a)
    }

    pub fn scalars<S: Scalar>(&self, name: &str) -> Result<Vec<S>> {
        let a = self.expect(name, S::DTYPE)?;
        Ok(a.bytes.chunks_exact(S::WIDTH).map(S::read_le).collect())
    }

    pub fn tensor<S: Scalar>(&self, name: &str) -> Result<Tensor<S>> {
        let shape = self.expect(name, S::DTYPE)?.shape.clone();
        Tensor::from_vec(&shape, self.scalars(name)?)
            .map_err(|e| Error::Checkpoint(format!("array `{name}`: {e}")))
    }

    pub fn bools(&self, name: &str) -> Result<Vec<bool>> {
        let a = self.expect(name, "u8")?;
        a.bytes
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(Error::Checkpoint(format!("array `{name}`: non-boolean byte {b}"))),
            })
            .collect()
    }

    pub fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        let a = self.expect(name, "u64")?;
        Ok(a.bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries = self
            .arrays
            .iter()
            .map(|a| {
                let e = Entry {
                    name: a.name.clone(),
                    dtype: a.dtype.clone(),
                    shape: a.shape.clone(),
                    offset,
                    len: a.bytes.len() as u64,
                };
                offset += a.bytes.len() as u64;
                e
            })
            .collect();
        let manifest = Manifest {
            version: VERSION,
            meta: self.meta.clone(),
            arrays: entries,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest is plain data");
        let mut out = Vec::with_capacity(PREFIX + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            out.extend_from_slice(&a.bytes);
        }
        out
    }

    /// Decodes a whole container; nothing is returned unless every entry is
    /// consistent with the payload.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < PREFIX || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let body = &bytes[PREFIX..];
        if mlen > body.len() as u64 {
            return Err(bad(format!("manifest length {mlen} exceeds file")));
        }
        let (json, payload) = body.split_at(mlen as usize);
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.version != VERSION {
            return Err(bad(format!(
                "manifest version {} does not match header {VERSION}",
                manifest.version
            )));
        }
        let mut expected = 0u64;
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for e in &manifest.arrays {
            let width = dtype_width(&e.dtype)
                .ok_or_else(|| bad(format!("array `{}`: unknown dtype {}", e.name, e.dtype)))?;
            let count = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
            if count.and_then(|c| c.checked_mul(width as u64)) != Some(e.len) {
                return Err(bad(format!(
                    "array `{}`: {} bytes do not fit shape {:?} of {}",
                    e.name, e.len, e.shape, e.dtype
                )));
            }
            if e.offset != expected {
                return Err(bad(format!(
                    "array `{}`: offset {} (expected {expected})",
                    e.name, e.offset
                )));
            }
            expected += e.len;
            if expected > payload.len() as u64 {
                return Err(bad(format!("array `{}` runs past the payload", e.name)));
            }
            if arrays.iter().any(|a: &NamedArray| a.name == e.name) {
                return Err(bad(format!("duplicate array `{}`", e.name)));
            }
            arrays.push(NamedArray {
                name: e.name.clone(),
                dtype: e.dtype.clone(),
                shape: e.shape.clone(),
                bytes: payload[e.offset as usize..expected as usize].to_vec(),
            });
        }
        if expected != payload.len() as u64 {
            return Err(bad(format!(
                "{} trailing payload bytes",
                payload.len() as u64 - expected
            )));
        }
        Ok(Checkpoint {
            meta: manifest.meta,
            arrays,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}
