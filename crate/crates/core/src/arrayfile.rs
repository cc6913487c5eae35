//! Self-describing little-endian 2D array files.
//!
//! Layout: the 5-byte magic `MTMR1`, one dtype byte (0 = f32, 1 = u8), the
//! height and width as `u32`, then the values in row-major order.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"MTMR1";
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U8: u8 = 1;
const HEADER_LEN: usize = 5 + 1 + 4 + 4;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Array2<f32>),
    U8(Array2<u8>),
}

impl ArrayData {
    pub fn dim(&self) -> (usize, usize) {
        match self {
            ArrayData::F32(a) => a.dim(),
            ArrayData::U8(a) => a.dim(),
        }
    }
}

fn header(dtype: u8, (h, w): (usize, usize), payload: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload);
    out.extend_from_slice(MAGIC);
    out.push(dtype);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out
}

pub fn encode_f32(a: &Array2<f32>) -> Vec<u8> {
    let mut out = header(DTYPE_F32, a.dim(), a.len() * 4);
    for v in a.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_u8(a: &Array2<u8>) -> Vec<u8> {
    let mut out = header(DTYPE_U8, a.dim(), a.len());
    out.extend(a.iter().copied());
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ArrayData> {
    let corrupt = |reason: &str| Error::CorruptFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < HEADER_LEN || &bytes[..5] != MAGIC {
        return Err(corrupt("missing MTMR1 header"));
    }
    let dtype = bytes[5];
    let h = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    match dtype {
        DTYPE_F32 => {
            if body.len() != h * w * 4 {
                return Err(corrupt("payload length does not match f32 shape"));
            }
            let data = body
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(ArrayData::F32(Array2::from_shape_vec((h, w), data).unwrap()))
        }
        DTYPE_U8 => {
            if body.len() != h * w {
                return Err(corrupt("payload length does not match u8 shape"));
            }
            Ok(ArrayData::U8(
                Array2::from_shape_vec((h, w), body.to_vec()).unwrap(),
            ))
        }
        other => Err(corrupt(&format!("unknown dtype code {other}"))),
    }
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<ArrayData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn read_f32(path: &Path) -> Result<Array2<f32>> {
    match read(path)? {
        ArrayData::F32(a) => Ok(a),
        ArrayData::U8(_) => Err(Error::CorruptFile {
            path: path.to_path_buf(),
            reason: "expected f32 data, found u8".into(),
        }),
    }
}

pub fn read_u8(path: &Path) -> Result<Array2<u8>> {
    match read(path)? {
        ArrayData::U8(a) => Ok(a),
        ArrayData::F32(_) => Err(Error::CorruptFile {
            path: path.to_path_buf(),
            reason: "expected u8 data, found f32".into(),
        }),
    }
}
