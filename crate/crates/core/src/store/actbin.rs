// SPDX-License-Identifier: MIT OR Apache-2.0

//! ACTB matrix files.
//!
//! Little-endian layout:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `b"ACTB"`                |
//! | 4      | 4    | `u32` version, always 1        |
//! | 8      | 4    | `u32` rows                     |
//! | 12     | 4    | `u32` cols                     |
//! | 16     | 4·rows·cols | `f32` values, row-major |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::Matrix;

pub const MAGIC: [u8; 4] = *b"ACTB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

pub fn encode_actbin(m: &Matrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows())
        .map_err(|_| Error::InvalidArgument(format!("{} rows exceed u32", m.rows())))?;
    let cols = u32::try_from(m.cols())
        .map_err(|_| Error::InvalidArgument(format!("{} cols exceed u32", m.cols())))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * m.data().len());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&rows.to_le_bytes());
    buf.extend_from_slice(&cols.to_le_bytes());
    for (index, &x) in m.data().iter().enumerate() {
        let v = x as f32;
        if !v.is_finite() {
            // in range for f64 but not for f32
            return Err(Error::NonFinite { index });
        }
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_actbin(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = word(4);
    if version != VERSION {
        return Err(Error::VersionMismatch { found: version });
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::ShapeMismatch(format!("{rows}x{cols} overflows")))?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::TrailingBytes {
            expected,
            found: bytes.len(),
        });
    }
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Matrix::new(rows, cols, data)
}

pub fn write_actbin(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_actbin(m)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_actbin(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_actbin(&bytes)
}

/// Rounds every entry through `f32`, i.e. what a write/read cycle yields.
pub fn round_to_f32(m: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) as f32 as f64)
}
