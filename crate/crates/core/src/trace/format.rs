// SPDX-License-Identifier: MIT OR Apache-2.0

//! Flat binary arrays.
//!
//! Layout (little-endian): `"AGTR"`, dtype code `u8`, rank `u8`, format
//! version `u16`, payload byte length `u64`, then `rank` dims as `u64`, the
//! payload, and a CRC-32 of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ARRAY_MAGIC: &[u8; 4] = b"AGTR";
pub const ARRAY_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    I32,
    F32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::U8 => 1,
            DType::I32 => 2,
            DType::F32 => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(DType::U8),
            2 => Some(DType::I32),
            3 => Some(DType::F32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::I32 | DType::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    U8(Vec<u8>),
    I32(Vec<i32>),
    F32(Vec<f32>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::U8(_) => DType::U8,
            ArrayData::I32(_) => DType::I32,
            ArrayData::F32(_) => DType::F32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::U8(v) => v.len(),
            ArrayData::I32(v) => v.len(),
            ArrayData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An n-dimensional array with a shape.
#[derive(Clone, Debug, PartialEq)]
pub struct NdArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

/// Total encoded size of an array with the given dtype and shape.
pub fn encoded_len(dtype: DType, shape: &[usize]) -> u64 {
    let n: usize = shape.iter().product();
    (HEADER_LEN + 8 * shape.len() + n * dtype.size() + 4) as u64
}

impl NdArray {
    pub fn new(shape: Vec<usize>, data: ArrayData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} holds {n} values, got {}", data.len())));
        }
        if shape.len() > u8::MAX as usize {
            return Err(Error::Shape("rank above 255".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn f32(shape: Vec<usize>, v: Vec<f32>) -> Result<Self> {
        Self::new(shape, ArrayData::F32(v))
    }

    pub fn u8(shape: Vec<usize>, v: Vec<u8>) -> Result<Self> {
        Self::new(shape, ArrayData::U8(v))
    }

    pub fn i32(shape: Vec<usize>, v: Vec<i32>) -> Result<Self> {
        Self::new(shape, ArrayData::I32(v))
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dtype = self.dtype();
        let payload = self.data.len() * dtype.size();
        let mut out = Vec::with_capacity(encoded_len(dtype, &self.shape) as usize);
        out.extend_from_slice(ARRAY_MAGIC);
        out.push(dtype.code());
        out.push(self.shape.len() as u8);
        out.extend_from_slice(&ARRAY_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload as u64).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            ArrayData::U8(v) => out.extend_from_slice(v),
            ArrayData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corruption {
            path: origin.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < HEADER_LEN + 4 || &bytes[..4] != ARRAY_MAGIC {
            return Err(corrupt("missing array magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(corrupt("checksum mismatch"));
        }
        let version = u16::from_le_bytes([body[6], body[7]]);
        if version != ARRAY_VERSION {
            return Err(Error::Version {
                found: version as u32,
                expected: ARRAY_VERSION as u32,
            });
        }
        let dtype = DType::from_code(body[4]).ok_or_else(|| corrupt("unknown dtype"))?;
        let rank = body[5] as usize;
        let payload = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let dims_end = HEADER_LEN + 8 * rank;
        if body.len() != dims_end + payload {
            return Err(corrupt("length does not match header"));
        }
        let shape: Vec<usize> = body[HEADER_LEN..dims_end]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let n: usize = shape.iter().product();
        if n * dtype.size() != payload {
            return Err(corrupt("payload does not match shape"));
        }
        let raw = &body[dims_end..];
        let data = match dtype {
            DType::U8 => ArrayData::U8(raw.to_vec()),
            DType::I32 => ArrayData::I32(raw.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::F32 => ArrayData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        Ok(Self { shape, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, path)
    }

    pub fn into_f32(self, origin: &Path) -> Result<Vec<f32>> {
        match self.data {
            ArrayData::F32(v) => Ok(v),
            _ => Err(Error::Corruption {
                path: origin.to_path_buf(),
                reason: "expected f32 array".into(),
            }),
        }
    }
}
