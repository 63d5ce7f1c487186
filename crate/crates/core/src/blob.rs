//! Binary container used by checkpoints and embedding pools: a little-endian
//! `u64` header length, a UTF-8 JSON header, then raw little-endian `f64`s.

use std::fs;
use std::path::Path;

use serde::Serialize;
use serde::de::DeserializeOwned;

use crate::error::{Error, Result};

pub fn write_blob<H: Serialize>(path: &Path, header: &H, floats: &[f64]) -> Result<()> {
    let header = serde_json::to_vec(header).map_err(|e| Error::invalid(e.to_string()))?;
    let mut bytes = Vec::with_capacity(8 + header.len() + floats.len() * 8);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for v in floats {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_blob<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |message: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: message.to_string(),
    };
    if bytes.len() < 8 {
        return Err(corrupt("truncated header length"));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body_start = 8usize
        .checked_add(header_len)
        .filter(|end| *end <= bytes.len())
        .ok_or_else(|| corrupt("header length exceeds file size"))?;
    let header: H = serde_json::from_slice(&bytes[8..body_start])
        .map_err(|e| corrupt(&format!("bad header: {e}")))?;
    let body = &bytes[body_start..];
    if body.len() % 8 != 0 {
        return Err(corrupt("float block is not a multiple of 8 bytes"));
    }
    let floats = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, floats))
}
