//! Self-describing binary container shared by feature files and checkpoints.
//!
//! Layout: 4-byte magic `LGBF`, little-endian `u32` header length `H`,
//! `H` bytes of UTF-8 JSON, then the raw little-endian payload.

use std::io::Write;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"LGBF";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes (expected \"LGBF\")")]
    BadMagic,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("dimension mismatch: header implies {expected} payload bytes, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
}

/// Splits a container into its parsed JSON header and the raw payload bytes.
pub fn split_container<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, &[u8]), FormatError> {
    if bytes.len() < 8 {
        return Err(FormatError::MalformedHeader(format!(
            "file is {} bytes, shorter than the 8-byte preamble",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header_end = 8usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            FormatError::MalformedHeader(format!(
                "header length {header_len} exceeds file size {}",
                bytes.len()
            ))
        })?;
    let header: H = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
    Ok((header, &bytes[header_end..]))
}

pub fn write_container<W: Write, H: Serialize>(
    mut w: W,
    header: &H,
    payload: &[u8],
) -> std::io::Result<()> {
    let header = serde_json::to_vec(header)?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| std::io::Error::other("header longer than u32::MAX bytes"))?;
    w.write_all(MAGIC)?;
    w.write_all(&header_len.to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(payload)?;
    Ok(())
}

/// Checks that `payload` holds exactly `count` elements of `width` bytes.
pub fn check_payload_len(payload: &[u8], count: usize, width: usize) -> Result<(), FormatError> {
    let expected = count * width;
    match payload.len().cmp(&expected) {
        std::cmp::Ordering::Less => Err(FormatError::Truncated {
            expected,
            found: payload.len(),
        }),
        std::cmp::Ordering::Greater => Err(FormatError::DimensionMismatch {
            expected,
            found: payload.len(),
        }),
        std::cmp::Ordering::Equal => Ok(()),
    }
}

pub fn encode_f32(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

pub fn encode_f64(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().flat_map(f64::to_le_bytes).collect()
}

pub fn decode_f32(payload: &[u8]) -> Vec<f32> {
    payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn decode_f64(payload: &[u8]) -> Vec<f64> {
    payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}
