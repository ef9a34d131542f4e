//! `GVTENS01` tensor archives.
//!
//! Layout: the 8 magic bytes `GVTENS01`, a little-endian `u32` header
//! length, a UTF-8 JSON header
//! `{"entries":[{"name","dtype","shape","offset","len"}]}`, then the raw
//! little-endian row-major payloads back to back. `offset` and `len` are in
//! bytes, relative to the first payload byte.

use super::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"GVTENS01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryHeader {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    entries: Vec<EntryHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: Dtype,
    pub tensor: Tensor,
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    entries: Vec<Entry>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        self.push_typed(name, tensor, Dtype::F64)
    }

    /// Store as `f32`. The in-memory copy is rounded so it matches what a
    /// reader will see.
    pub fn push_f32(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        self.push_typed(name, tensor, Dtype::F32)
    }

    pub fn push_typed(&mut self, name: impl Into<String>, tensor: Tensor, dtype: Dtype) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::format(format!("duplicate archive entry `{name}`")));
        }
        let tensor = match dtype {
            Dtype::F64 => tensor,
            Dtype::F32 => tensor.map(|v| v as f32 as f64),
        };
        self.entries.push(Entry { name, dtype, tensor });
        Ok(())
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::format(format!("archive has no entry `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut headers = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let len = (e.tensor.len() * e.dtype.width()) as u64;
            headers.push(EntryHeader {
                name: e.name.clone(),
                dtype: e.dtype,
                shape: e.tensor.shape().to_vec(),
                offset,
                len,
            });
            offset += len;
        }
        let header = serde_json::to_vec(&Header { entries: headers })?;
        let header_len = u32::try_from(header.len()).map_err(|_| Error::format("archive header too large"))?;
        let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for e in &self.entries {
            match e.dtype {
                Dtype::F64 => e.tensor.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Dtype::F32 => e
                    .tensor
                    .data()
                    .iter()
                    .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::format("missing GVTENS01 magic"));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body_start = 12 + header_len;
        if bytes.len() < body_start {
            return Err(Error::format("truncated archive header"));
        }
        let header: Header = serde_json::from_slice(&bytes[12..body_start])?;
        let body = &bytes[body_start..];
        let mut archive = Archive::new();
        for h in header.entries {
            let count: usize = h.shape.iter().product();
            let width = h.dtype.width();
            if h.len as usize != count * width {
                return Err(Error::format(format!("entry `{}` length disagrees with its shape", h.name)));
            }
            let start = h.offset as usize;
            let end = start
                .checked_add(h.len as usize)
                .filter(|&e| e <= body.len())
                .ok_or_else(|| Error::format(format!("entry `{}` runs past end of archive", h.name)))?;
            let raw = &body[start..end];
            let data: Vec<f64> = match h.dtype {
                Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            let tensor = Tensor::new(h.shape, data).map_err(|e| Error::format(e.to_string()))?;
            archive.push_typed(h.name, tensor, h.dtype)?;
        }
        Ok(archive)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_magic_then_header_then_payload() {
        let mut a = Archive::new();
        a.push("x", Tensor::new([2], vec![1.0, -2.5]).unwrap()).unwrap();
        let bytes = a.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"GVTENS01");
        let hl = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hl]).unwrap();
        assert_eq!(
            header,
            serde_json::json!({"entries":[{"name":"x","dtype":"f64","shape":[2],"offset":0,"len":16}]})
        );
        assert_eq!(&bytes[12 + hl..12 + hl + 8], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 12 + hl + 16);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Archive::from_bytes(b"NOTMAGIC\0\0\0\0").is_err());
        let mut a = Archive::new();
        a.push("x", Tensor::ones([3])).unwrap();
        let bytes = a.to_bytes().unwrap();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut a = Archive::new();
        a.push("x", Tensor::ones([1])).unwrap();
        assert!(a.push("x", Tensor::ones([1])).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip_exactly(
            vals in prop::collection::vec(-1e6f64..1e6, 1..40),
            as_f32 in any::<bool>(),
        ) {
            let n = vals.len();
            let mut a = Archive::new();
            let t = Tensor::new([n], vals).unwrap();
            if as_f32 { a.push_f32("v", t.clone()).unwrap() } else { a.push("v", t.clone()).unwrap() }
            a.push("w", Tensor::new([1, n], t.data().to_vec()).unwrap()).unwrap();
            let bytes = a.to_bytes().unwrap();
            let back = Archive::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &a);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
