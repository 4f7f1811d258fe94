//! Binary feature matrices.
//!
//! Layout (all little-endian):
//!
//! | offset | size | field                       |
//! |--------|------|-----------------------------|
//! | 0      | 8    | magic `VPRGFEAT`            |
//! | 8      | 4    | format version (`u32`, = 1) |
//! | 12     | 8    | rows (`u64`)                |
//! | 20     | 8    | cols (`u64`)                |
//! | 28     | 4·rows·cols | row-major `f32` payload |

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"VPRGFEAT";
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_HEADER_LEN: usize = 28;

pub fn encode_features(x: &Array2<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * x.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(x.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(x.ncols() as u64).to_le_bytes());
    for v in x.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Array2<f32>> {
    let fail = |offset: usize, reason: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(fail(
            bytes.len(),
            format!("header needs {FEATURE_HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[..8] != FEATURE_MAGIC {
        return Err(fail(0, "bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FEATURE_VERSION {
        return Err(fail(8, format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let cols = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes"));
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fail(12, format!("matrix {rows}×{cols} overflows")))?;
    let actual = (bytes.len() - FEATURE_HEADER_LEN) as u64;
    if actual != expected {
        return Err(fail(
            FEATURE_HEADER_LEN + actual.min(expected) as usize,
            format!("payload has {actual} bytes, expected {expected}"),
        ));
    }
    let values: Vec<f32> = bytes[FEATURE_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Array2::from_shape_vec((rows as usize, cols as usize), values).map_err(|e| fail(12, e.to_string()))
}

pub fn write_features(path: &Path, x: &Array2<f32>) -> Result<()> {
    fs::write(path, encode_features(x)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

pub fn to_f64(x: &Array2<f32>) -> Array2<f64> {
    x.mapv(f64::from)
}

pub fn to_f32(x: &Array2<f64>) -> Array2<f32> {
    x.mapv(|v| v as f32)
}
