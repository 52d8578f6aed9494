//! Binary container shared by dataset, embedding and checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON {"meta": ..., "arrays": [...]}
//! arrays       raw f32 / i32 values, in manifest order
//! crc32        u32 over header_len, header and arrays
//! ```
//!
//! Each manifest entry records `name`, `dtype` (`"f32"` or `"i32"`), `shape`
//! and `offset` (bytes from the start of the array section).

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::I32(v) => v.len(),
        }
    }

    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::I32(_) => "i32",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data: ArrayData::F32(data),
        }
    }

    pub fn i32(name: impl Into<String>, shape: Vec<usize>, data: Vec<i32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data: ArrayData::I32(data),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: Value,
    arrays: Vec<ManifestEntry>,
}

pub fn encode(magic: &[u8; 8], meta: Value, arrays: &[NamedArray]) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(arrays.len());
    for a in arrays {
        let expected: usize = a.shape.iter().product();
        if expected != a.data.len() {
            return Err(Error::InvalidShape(format!(
                "array {} has shape {:?} but {} values",
                a.name,
                a.shape,
                a.data.len()
            )));
        }
        entries.push(ManifestEntry {
            name: a.name.clone(),
            dtype: a.data.dtype().to_string(),
            shape: a.shape.clone(),
            offset,
        });
        offset += 4 * a.data.len() as u64;
    }
    let header = serde_json::to_vec(&Header {
        meta,
        arrays: entries,
    })?;

    let mut out = Vec::with_capacity(8 + 8 + header.len() + offset as usize + 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for a in arrays {
        match &a.data {
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    let crc = crc32fast::hash(&out[8..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Parsed container: the `meta` JSON and arrays keyed by manifest order.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub meta: Value,
    pub arrays: Vec<NamedArray>,
}

impl Decoded {
    fn find(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::format(0, format!("missing array '{name}'")))
    }

    pub fn f32(&self, name: &str, shape: &[usize]) -> Result<&[f32]> {
        let a = self.find(name)?;
        match &a.data {
            ArrayData::F32(v) if a.shape == shape => Ok(v),
            ArrayData::F32(_) => Err(Error::format(
                0,
                format!("array '{name}' has shape {:?}, expected {shape:?}", a.shape),
            )),
            ArrayData::I32(_) => Err(Error::format(0, format!("array '{name}' is not f32"))),
        }
    }

    pub fn i32(&self, name: &str, shape: &[usize]) -> Result<&[i32]> {
        let a = self.find(name)?;
        match &a.data {
            ArrayData::I32(v) if a.shape == shape => Ok(v),
            ArrayData::I32(_) => Err(Error::format(
                0,
                format!("array '{name}' has shape {:?}, expected {shape:?}", a.shape),
            )),
            ArrayData::F32(_) => Err(Error::format(0, format!("array '{name}' is not i32"))),
        }
    }
}

pub fn decode(magic: &[u8; 8], bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < 8 || &bytes[..8] != magic {
        return Err(Error::format(
            0,
            format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    if bytes.len() < 16 {
        return Err(Error::format(8, "truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let hend = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(16, format!("truncated header ({hlen} bytes declared)")))?;
    let header: Header = serde_json::from_slice(&bytes[16..hend])
        .map_err(|e| Error::format(16, format!("malformed header: {e}")))?;

    let mut arrays = Vec::with_capacity(header.arrays.len());
    let mut expected_offset = 0u64;
    for e in &header.arrays {
        if e.offset != expected_offset {
            return Err(Error::format(
                hend as u64 + e.offset,
                format!("array '{}' has offset {}, expected {expected_offset}", e.name, e.offset),
            ));
        }
        let n: usize = e.shape.iter().product();
        let start = hend + e.offset as usize;
        let end = start + 4 * n;
        if end > bytes.len() {
            return Err(Error::format(
                start as u64,
                format!("truncated in array '{}' ({} of {} bytes present)", e.name, bytes.len().saturating_sub(start), 4 * n),
            ));
        }
        let raw = &bytes[start..end];
        let data = match e.dtype.as_str() {
            "f32" => ArrayData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            "i32" => ArrayData::I32(
                raw.chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            other => {
                return Err(Error::format(16, format!("array '{}' has unknown dtype '{other}'", e.name)))
            }
        };
        arrays.push(NamedArray {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data,
        });
        expected_offset += 4 * n as u64;
    }
    let payload_end = hend + expected_offset as usize;
    if bytes.len() < payload_end + 4 {
        return Err(Error::format(payload_end as u64, "truncated checksum"));
    }
    if bytes.len() > payload_end + 4 {
        return Err(Error::format(payload_end as u64 + 4, "trailing bytes after checksum"));
    }
    let stored = u32::from_le_bytes(bytes[payload_end..payload_end + 4].try_into().unwrap());
    let actual = crc32fast::hash(&bytes[8..payload_end]);
    if stored != actual {
        return Err(Error::format(
            payload_end as u64,
            format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    Ok(Decoded {
        meta: header.meta,
        arrays,
    })
}

pub fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
