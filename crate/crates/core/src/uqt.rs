//! `UQT1` tensor files: magic `UQT1`, u8 dtype code (0 = f32, 1 = u8),
//! u8 rank, rank × u32 little-endian dims, then the row-major payload
//! (f32 little-endian or raw bytes).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};

pub const MAGIC: &[u8; 4] = b"UQT1";
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U8: u8 = 1;

fn header(dtype: u8, dims: &[usize]) -> Result<Vec<u8>> {
    let rank = u8::try_from(dims.len()).map_err(|_| Error::Format("rank exceeds 255".into()))?;
    let mut out = Vec::with_capacity(6 + 4 * dims.len());
    out.extend_from_slice(MAGIC);
    out.push(dtype);
    out.push(rank);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_f32(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let mut out = header(DTYPE_F32, t.dims())?;
    out.reserve(4 * t.len());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_u8(l: &LabelMap) -> Result<Vec<u8>> {
    let mut out = header(DTYPE_U8, l.dims())?;
    out.extend_from_slice(l.data());
    Ok(out)
}

/// Decoded payload of either dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum UqtTensor {
    F32(Tensor<f32>),
    U8(LabelMap),
}

pub fn decode(bytes: &[u8]) -> Result<UqtTensor> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let dtype = bytes[4];
    let rank = bytes[5] as usize;
    let body = 6 + 4 * rank;
    if bytes.len() < body {
        return Err(Error::Format("truncated header".into()));
    }
    let dims: Vec<usize> = bytes[6..body]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let payload = &bytes[body..];
    match dtype {
        DTYPE_F32 => {
            if payload.len() != 4 * count {
                return Err(Error::Format(format!(
                    "expected {} payload bytes, found {}",
                    4 * count,
                    payload.len()
                )));
            }
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(UqtTensor::F32(Tensor::new(dims, data)?))
        }
        DTYPE_U8 => {
            if payload.len() != count {
                return Err(Error::Format(format!(
                    "expected {count} payload bytes, found {}",
                    payload.len()
                )));
            }
            Ok(UqtTensor::U8(LabelMap::new(dims, payload.to_vec())?))
        }
        other => Err(Error::Format(format!("unknown dtype code {other}"))),
    }
}

pub fn write_f32(path: &Path, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_f32(t)?).map_err(|e| Error::io(path, e))
}

pub fn write_u8(path: &Path, l: &LabelMap) -> Result<()> {
    fs::write(path, encode_u8(l)?).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<UqtTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn read_f32(path: &Path) -> Result<Tensor<f32>> {
    match read(path)? {
        UqtTensor::F32(t) => Ok(t),
        UqtTensor::U8(_) => Err(Error::Format(format!("{} holds u8, expected f32", path.display()))),
    }
}

pub fn read_u8(path: &Path) -> Result<LabelMap> {
    match read(path)? {
        UqtTensor::U8(l) => Ok(l),
        UqtTensor::F32(_) => Err(Error::Format(format!("{} holds f32, expected u8", path.display()))),
    }
}
