//! Density file format: `b"QDM1"`, `u32` LE height, `u32` LE width, then
//! `height * width` `f32` LE values in row-major order.

use std::fs;
use std::path::Path;

use crate::decoder::DensityMap;
use crate::error::{io_err, QicaError, Result};

pub const MAGIC: &[u8; 4] = b"QDM1";
const HEADER_LEN: usize = 12;

pub fn encode(map: &DensityMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * map.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(map.height as u32).to_le_bytes());
    out.extend_from_slice(&(map.width as u32).to_le_bytes());
    for v in &map.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<DensityMap> {
    if bytes.len() < HEADER_LEN {
        return Err(QicaError::Qdm(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(QicaError::Qdm(format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (height, width) = (word(4), word(8));
    let expected = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| QicaError::Qdm(format!("{height}x{width} overflows")))?;
    if bytes.len() != expected {
        return Err(QicaError::Qdm(format!(
            "{height}x{width} needs {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(DensityMap { height, width, data })
}

pub fn write(path: &Path, map: &DensityMap) -> Result<()> {
    fs::write(path, encode(map)).map_err(io_err(path))
}

pub fn read(path: &Path) -> Result<DensityMap> {
    decode(&fs::read(path).map_err(io_err(path))?)
}
