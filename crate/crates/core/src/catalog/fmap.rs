//! FMAP: a small portable container of named `f32` tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes   "FMAP"
//! version      u16       1
//! entry_count  u32
//! meta_len     u32
//! metadata     meta_len bytes, UTF-8 JSON object of string -> string
//! entry table  entry_count times:
//!     name_len u16, name (UTF-8), dtype u8 (0 = f32), ndim u8,
//!     dims u32 * ndim, offset u64 (bytes from payload start)
//! payload_len  u64
//! payload      payload_len bytes of little-endian f32
//! ```
//!
//! Entries must be unique by name, may not overlap, and must exactly tile
//! the payload.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use thiserror::Error;

pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
pub const FMAP_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum FmapError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt container: {0}")]
    Corrupt(String),
    #[error("invalid entry: {0}")]
    InvalidEntry(String),
}

fn corrupt(msg: impl Into<String>) -> FmapError {
    FmapError::Corrupt(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            dims,
            data,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FmapContainer {
    pub metadata: BTreeMap<String, String>,
    pub entries: Vec<NamedTensor>,
}

impl FmapContainer {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn with_metadata(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn push(&mut self, tensor: NamedTensor) {
        self.entries.push(tensor);
    }

    pub fn encode(&self) -> Result<Vec<u8>, FmapError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(FmapError::InvalidEntry(format!("duplicate name {:?}", e.name)));
            }
            if e.name.len() > usize::from(u16::MAX) {
                return Err(FmapError::InvalidEntry("name too long".into()));
            }
            if e.dims.len() > usize::from(u8::MAX) || e.dims.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
                return Err(FmapError::InvalidEntry(format!("bad dims {:?} for {:?}", e.dims, e.name)));
            }
            if e.dims.iter().product::<usize>() != e.data.len() {
                return Err(FmapError::InvalidEntry(format!(
                    "{:?}: dims {:?} do not match {} values",
                    e.name,
                    e.dims,
                    e.data.len()
                )));
            }
        }
        let meta = serde_json::to_vec(&self.metadata).expect("string map serializes");
        let mut out = Vec::new();
        out.extend_from_slice(FMAP_MAGIC);
        out.extend_from_slice(&FMAP_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        let mut offset = 0u64;
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(e.dims.len() as u8);
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += e.data.len() as u64 * 4;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for e in &self.entries {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FmapError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != FMAP_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u16()?;
        if version != FMAP_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let meta_len = r.u32()? as usize;
        let metadata: BTreeMap<String, String> =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| corrupt(format!("metadata: {e}")))?;

        struct Header {
            name: String,
            dims: Vec<usize>,
            offset: u64,
        }
        let mut headers = Vec::with_capacity(count.min(1 << 16));
        let mut names = HashSet::new();
        for _ in 0..count {
            let name_len = usize::from(r.u16()?);
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| corrupt("entry name is not UTF-8"))?
                .to_owned();
            if !names.insert(name.clone()) {
                return Err(corrupt(format!("duplicate entry {name:?}")));
            }
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(corrupt(format!("unsupported dtype {dtype}")));
            }
            let ndim = usize::from(r.u8()?);
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            if dims.contains(&0) {
                return Err(corrupt(format!("zero dimension in {name:?}")));
            }
            let offset = r.u64()?;
            headers.push(Header { name, dims, offset });
        }
        let payload_len = r.u64()?;
        let payload = r.take(usize::try_from(payload_len).map_err(|_| corrupt("payload too large"))?)?;
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes after payload"));
        }

        // entries must tile the payload without gaps or overlap
        let mut spans: Vec<(u64, u64, usize)> = headers
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let n = h.dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
                n.and_then(|n| n.checked_mul(4))
                    .and_then(|len| h.offset.checked_add(len).map(|end| (h.offset, end, i)))
                    .ok_or_else(|| corrupt("entry size overflow"))
            })
            .collect::<Result<_, _>>()?;
        spans.sort_unstable();
        let mut cursor = 0u64;
        for &(start, end, i) in &spans {
            if start != cursor {
                return Err(corrupt(format!(
                    "entry {:?} at offset {start}, expected {cursor} (overlap or gap)",
                    headers[i].name
                )));
            }
            cursor = end;
        }
        if cursor != payload_len {
            return Err(corrupt(format!("payload length {payload_len} != entry total {cursor}")));
        }

        let entries = headers
            .into_iter()
            .map(|h| {
                let n: usize = h.dims.iter().product();
                let start = h.offset as usize;
                let data = payload[start..start + n * 4]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                NamedTensor {
                    name: h.name,
                    dims: h.dims,
                    data,
                }
            })
            .collect();
        Ok(Self { metadata, entries })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FmapError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FmapError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FmapError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, FmapError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, FmapError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn fmap_write(container: &FmapContainer, path: impl AsRef<Path>) -> Result<(), FmapError> {
    std::fs::write(path, container.encode()?)?;
    Ok(())
}

pub fn fmap_read(path: impl AsRef<Path>) -> Result<FmapContainer, FmapError> {
    FmapContainer::decode(&std::fs::read(path)?)
}
