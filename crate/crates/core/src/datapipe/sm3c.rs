//! SM3C three-component waveform container.
//!
//! Little-endian layout: magic `SM3C`, version `u16 = 1`, sample rate `f64`,
//! sample count `u64`, then the three channels back to back as `f32`.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{CoreError, Result};

pub const MAGIC: &[u8; 4] = b"SM3C";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 8 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Sm3c {
    pub sample_rate_hz: f64,
    pub channels: [Vec<f32>; 3],
}

pub fn encode(w: &Sm3c) -> Result<Vec<u8>> {
    let n = w.channels[0].len();
    if w.channels.iter().any(|c| c.len() != n) {
        return Err(CoreError::Format {
            what: "SM3C",
            detail: "channel lengths differ".into(),
        });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 12 * n);
    out.write_all(MAGIC).expect("vec write");
    out.write_u16::<LittleEndian>(VERSION).expect("vec write");
    out.write_f64::<LittleEndian>(w.sample_rate_hz).expect("vec write");
    out.write_u64::<LittleEndian>(n as u64).expect("vec write");
    for c in &w.channels {
        for &v in c {
            out.write_f32::<LittleEndian>(v).expect("vec write");
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Sm3c> {
    if bytes.len() < 4 {
        return Err(CoreError::Truncated {
            what: "SM3C",
            detail: format!("{} bytes, header needs {HEADER_LEN}", bytes.len()),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(CoreError::BadMagic {
            what: "SM3C",
            expected: String::from_utf8_lossy(MAGIC).into(),
            found: String::from_utf8_lossy(&bytes[..4]).into(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(CoreError::Truncated {
            what: "SM3C",
            detail: format!("{} bytes, header needs {HEADER_LEN}", bytes.len()),
        });
    }
    let mut cur = Cursor::new(&bytes[4..]);
    let version = cur.read_u16::<LittleEndian>().expect("length checked");
    if version != VERSION {
        return Err(CoreError::Version {
            what: "SM3C",
            expected: VERSION,
            found: version,
        });
    }
    let sample_rate_hz = cur.read_f64::<LittleEndian>().expect("length checked");
    let n = cur.read_u64::<LittleEndian>().expect("length checked");
    let payload = bytes.len() - HEADER_LEN;
    let needed = n.checked_mul(12).ok_or_else(|| CoreError::Format {
        what: "SM3C",
        detail: format!("sample count {n} overflows"),
    })?;
    if (payload as u64) < needed {
        return Err(CoreError::Truncated {
            what: "SM3C",
            detail: format!("payload has {payload} bytes, {n} samples x 3 channels need {needed}"),
        });
    }
    if payload as u64 > needed {
        return Err(CoreError::Format {
            what: "SM3C",
            detail: format!("{} trailing bytes after payload", payload as u64 - needed),
        });
    }
    let n = n as usize;
    let mut read_channel = || -> Vec<f32> {
        let mut raw = vec![0u8; 4 * n];
        cur.read_exact(&mut raw).expect("length checked");
        raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect()
    };
    let channels = [read_channel(), read_channel(), read_channel()];
    Ok(Sm3c {
        sample_rate_hz,
        channels,
    })
}

pub fn write(path: &Path, w: &Sm3c) -> Result<()> {
    let bytes = encode(w)?;
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

pub fn read(path: &Path) -> Result<Sm3c> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode(&bytes)
}
