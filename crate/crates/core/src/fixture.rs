//! Golden M-scan fixtures: a 16-byte header followed by 1024x48 little-endian
//! `f32` pixels, row-major.
//!
//! ```text
//! 0  "MSCN"
//! 4  version  u32
//! 8  dz_air   f32  (µm / bin)
//! 12 n_s      f32
//! 16 pixels   f32 x 49152
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::dsp::{DepthAxis, MScan};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MSCN";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;
pub const FILE_LEN: usize = HEADER_LEN + MScan::ROWS * MScan::COLS * 4;

pub fn encode(scan: &MScan, axis: &DepthAxis) -> Vec<u8> {
    let mut out = Vec::with_capacity(FILE_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(axis.dz_air as f32).to_le_bytes());
    out.extend_from_slice(&(axis.n_s as f32).to_le_bytes());
    for v in scan.pixels() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Returns the image and the `(dz_air, n_s)` pair stored in the header.
pub fn decode(bytes: &[u8]) -> Result<(MScan, f32, f32)> {
    if bytes.len() != FILE_LEN {
        return Err(Error::Format(format!(
            "fixture is {} bytes, expected {FILE_LEN}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad fixture magic".into()));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    let version = u32::from_le_bytes(word(4));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported fixture version {version}")));
    }
    let dz_air = f32::from_le_bytes(word(8));
    let n_s = f32::from_le_bytes(word(12));
    let pixels = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((MScan::from_pixels(pixels, 0)?, dz_air, n_s))
}

pub fn write(path: &Path, scan: &MScan, axis: &DepthAxis) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(scan, axis))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<(MScan, f32, f32)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
