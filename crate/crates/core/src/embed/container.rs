use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PVX1";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;

const HEADER_LEN: usize = 4 + 2 + 1 + 4 + 4;

pub fn write_container(path: &Path, rows: usize, dim: usize, data: &[f32]) -> Result<()> {
    debug_assert_eq!(rows * dim, data.len());
    let rows32 = u32::try_from(rows).map_err(|_| Error::InvalidInput("too many rows".into()))?;
    let dim32 = u32::try_from(dim).map_err(|_| Error::InvalidInput("dim too large".into()))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + data.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(DTYPE_F32);
    buf.extend_from_slice(&rows32.to_le_bytes());
    buf.extend_from_slice(&dim32.to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Returns `(rows, dim, row-major data)`.
pub fn read_container(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_container(&bytes).map_err(|message| Error::Format {
        path: path.to_path_buf(),
        message,
    })
}

fn parse_container(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<f32>), String> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err("bad magic (expected PVX1)".into());
    }
    if bytes.len() < HEADER_LEN {
        return Err("truncated header".into());
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let dtype = bytes[6];
    if dtype != DTYPE_F32 {
        return Err(format!("unsupported dtype code {dtype}"));
    }
    let rows = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[11..15].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or("row count overflow")?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(format!(
            "truncated payload: {} bytes for {rows}x{dim} f32 (need {expected})",
            payload.len()
        ));
    }
    if payload.len() > expected {
        return Err(format!("{} trailing bytes after payload", payload.len() - expected));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, dim, data))
}
