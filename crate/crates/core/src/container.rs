//! Binary container shared by window archives, checkpoints and sampler traces.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes, identifies the artifact kind
//! version      u32
//! header_len   u64
//! header       header_len bytes of JSON: {"meta": <any>, "arrays": [ArrayEntry...]}
//! payload      arrays back to back, in header order, raw little-endian
//! ```
//!
//! Every `ArrayEntry` carries its name, element type, shape and byte offset
//! relative to the start of the payload. Writing the same container twice
//! yields identical bytes.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    I64,
    U32,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 | DType::U32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
    U32(Vec<u32>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::F64(_) => DType::F64,
            ArrayData::I64(_) => DType::I64,
            ArrayData::U32(_) => DType::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::I64(v) => v.len(),
            ArrayData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => ArrayData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => ArrayData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I64 => ArrayData::I64(
                bytes
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U32 => ArrayData::U32(
                bytes
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
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
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: ArrayData) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// An in-memory container: a JSON metadata block plus named arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, array: NamedArray) {
        self.arrays.push(array);
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn take(&mut self, name: &str) -> Result<NamedArray> {
        let idx = self
            .arrays
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| Error::Corrupt {
                offset: 0,
                reason: format!("missing array `{name}`"),
            })?;
        Ok(self.arrays.remove(idx))
    }

    pub fn to_bytes(&self, magic: &[u8; 8]) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            let expected: usize = a.shape.iter().product();
            if expected != a.data.len() {
                return Err(Error::Shape(format!(
                    "array `{}` has shape {:?} but {} elements",
                    a.name,
                    a.shape,
                    a.data.len()
                )));
            }
            entries.push(ArrayEntry {
                name: a.name.clone(),
                dtype: a.data.dtype(),
                shape: a.shape.clone(),
                offset: payload.len() as u64,
            });
            a.data.write_le(&mut payload);
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            arrays: entries,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(magic);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn write<W: Write>(&self, magic: &[u8; 8], mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes(magic)?)?;
        Ok(())
    }

    pub fn from_bytes(magic: &[u8; 8], bytes: &[u8]) -> Result<Self> {
        let corrupt = |offset: usize, reason: String| Error::Corrupt {
            offset: offset as u64,
            reason,
        };
        if bytes.len() < 20 {
            return Err(corrupt(bytes.len(), "truncated preamble".into()));
        }
        if &bytes[..8] != magic {
            return Err(corrupt(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&bytes[..8]),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CONTAINER_VERSION {
            return Err(corrupt(8, format!("unsupported container version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt(12, format!("header length {header_len} exceeds file")))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| corrupt(20 + e.column(), format!("header JSON: {e}")))?;
        let payload = &bytes[header_end..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        let mut expected_offset = 0usize;
        for entry in header.arrays {
            let count: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            if start != expected_offset {
                return Err(corrupt(
                    header_end + start,
                    format!("array `{}` is not contiguous", entry.name),
                ));
            }
            let end = start + count * entry.dtype.width();
            if end > payload.len() {
                return Err(corrupt(
                    header_end + payload.len(),
                    format!("array `{}` truncated", entry.name),
                ));
            }
            arrays.push(NamedArray {
                name: entry.name,
                shape: entry.shape,
                data: ArrayData::read_le(entry.dtype, &payload[start..end]),
            });
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(corrupt(
                header_end + expected_offset,
                "trailing bytes after last array".into(),
            ));
        }
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }

    pub fn read<R: Read>(magic: &[u8; 8], mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(magic, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"TESTCONT";

    fn sample() -> Container {
        let mut c = Container::new(serde_json::json!({"k": 1, "name": "x"}));
        c.push(NamedArray::new("a", vec![2, 2], ArrayData::F64(vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5])));
        c.push(NamedArray::new("b", vec![3], ArrayData::U32(vec![1, 2, 3])));
        c.push(NamedArray::new("c", vec![0], ArrayData::F32(vec![])));
        c
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let bytes = c.to_bytes(MAGIC).unwrap();
        let back = Container::from_bytes(MAGIC, &bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(MAGIC).unwrap(), bytes);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let bytes = sample().to_bytes(MAGIC).unwrap();
        let err = Container::from_bytes(b"OTHERMAG", &bytes).unwrap_err();
        assert!(matches!(err, Error::Corrupt { offset: 0, .. }));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes(MAGIC).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        match Container::from_bytes(MAGIC, cut).unwrap_err() {
            Error::Corrupt { offset, .. } => assert!(offset > 20),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn shape_mismatch_on_write() {
        let mut c = Container::new(serde_json::Value::Null);
        c.push(NamedArray::new("a", vec![3], ArrayData::F64(vec![1.0])));
        assert!(matches!(c.to_bytes(MAGIC), Err(Error::Shape(_))));
    }
}
