//! Native `.evol` container.
//!
//! Layout (all little-endian):
//!
//! | bytes | content                         |
//! |-------|---------------------------------|
//! | 5     | magic `EVOL\0`                  |
//! | 2     | version, u16 = 1                |
//! | 16    | u32 C, D, H, W                  |
//! | 12    | f32 spacing (z, y, x)           |
//! | 12    | f32 origin (z, y, x)            |
//! | 4·N   | f32 payload, channel-major      |
//!
//! Scalar volumes use C = 1, displacement fields C = 3, embeddings C = channels.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::Dims;

pub const MAGIC: &[u8; 5] = b"EVOL\0";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 5 + 2 + 16 + 12 + 12;

/// Multi-channel f32 image as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct EvolImage {
    pub channels: usize,
    pub dims: Dims,
    pub spacing: [f32; 3],
    pub origin: [f32; 3],
    pub data: Vec<f32>,
}

pub fn encode(img: &EvolImage) -> Result<Vec<u8>> {
    let expected = img.channels * img.dims.len();
    if img.data.len() != expected {
        return Err(Error::SizeMismatch {
            expected: expected * 4,
            found: img.data.len() * 4,
        });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * expected);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for n in [img.channels, img.dims.0[0], img.dims.0[1], img.dims.0[2]] {
        let n = u32::try_from(n)
            .map_err(|_| Error::InvalidParameter(format!("extent {n} exceeds u32")))?;
        out.extend_from_slice(&n.to_le_bytes());
    }
    for v in img.spacing.iter().chain(img.origin.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<EvolImage> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::header("magic", "file shorter than the fixed header"));
    }
    if &bytes[..5] != MAGIC {
        return Err(Error::header("magic", "expected EVOL\\0"));
    }
    let version = u16::from_le_bytes([bytes[5], bytes[6]]);
    if version != VERSION {
        return Err(Error::header(
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let channels = u32_at(7);
    let dims = Dims([u32_at(11), u32_at(15), u32_at(19)]);
    let spacing = [f32_at(23), f32_at(27), f32_at(31)];
    let origin = [f32_at(35), f32_at(39), f32_at(43)];
    if channels == 0 || dims.is_empty() {
        return Err(Error::header("C/D/H/W", "zero extent"));
    }
    let count = channels
        .checked_mul(dims.len())
        .ok_or_else(|| Error::header("C/D/H/W", "extent overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 4 * count {
        return Err(Error::SizeMismatch {
            expected: 4 * count,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(EvolImage {
        channels,
        dims,
        spacing,
        origin,
        data,
    })
}

pub fn read(path: &Path) -> Result<EvolImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write(path: &Path, img: &EvolImage) -> Result<()> {
    let bytes = encode(img)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
