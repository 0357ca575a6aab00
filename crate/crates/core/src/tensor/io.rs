//! `CMBT` tensor container.
//!
//! Layout (little-endian): magic `b"CMBT"`, `u8` version (= 1), `u8` rank,
//! `rank` x `u64` dimensions, then the row-major `f64` payload.

use std::fs;
use std::path::Path;

use super::{numel_of, Tensor};
use crate::error::{CmbError, Result};

pub const CMBT_MAGIC: &[u8; 4] = b"CMBT";
pub const CMBT_VERSION: u8 = 1;

pub fn write_cmbt_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * t.rank() + 8 * t.numel());
    out.extend_from_slice(CMBT_MAGIC);
    out.push(CMBT_VERSION);
    out.push(u8::try_from(t.rank()).expect("rank fits in u8"));
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn format_err(offset: usize, message: impl Into<String>) -> CmbError {
    CmbError::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

pub fn read_cmbt_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 || &bytes[..4] != CMBT_MAGIC {
        return Err(format_err(0, "missing CMBT magic"));
    }
    match bytes.get(4) {
        Some(&CMBT_VERSION) => {}
        Some(&v) => return Err(format_err(4, format!("unsupported version {v}"))),
        None => return Err(format_err(4, "truncated before version")),
    }
    let rank = *bytes.get(5).ok_or_else(|| format_err(5, "truncated before rank"))? as usize;
    if rank == 0 {
        return Err(format_err(5, "rank must be at least 1"));
    }
    let mut pos = 6;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let chunk = bytes
            .get(pos..pos + 8)
            .ok_or_else(|| format_err(pos, "truncated dimension"))?;
        let d = u64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if d == 0 {
            return Err(format_err(pos, "zero dimension"));
        }
        shape.push(usize::try_from(d).map_err(|_| format_err(pos, "dimension overflow"))?);
        pos += 8;
    }
    let n = numel_of(&shape);
    let expected = n
        .checked_mul(8)
        .and_then(|b| b.checked_add(pos))
        .ok_or_else(|| format_err(pos, "payload size overflow"))?;
    if bytes.len() < expected {
        return Err(format_err(
            bytes.len(),
            format!("payload truncated: need {expected} bytes, have {}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(expected, "trailing bytes after payload"));
    }
    let data = bytes[pos..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(data, &shape)
}

pub fn write_cmbt(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_cmbt_bytes(t)).map_err(|e| CmbError::io(path, e))
}

pub fn read_cmbt(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CmbError::io(path, e))?;
    read_cmbt_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_byte_layout() {
        let t = Tensor::new(vec![1.0, -2.5], &[1, 2]).unwrap();
        let bytes = write_cmbt_bytes(&t);
        let mut expect = b"CMBT".to_vec();
        expect.extend_from_slice(&[1, 2]);
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1.0f64.to_le_bytes());
        expect.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn malformed_input_reports_offset() {
        let t = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let mut bytes = write_cmbt_bytes(&t);
        bytes.truncate(bytes.len() - 3);
        match read_cmbt_bytes(&bytes) {
            Err(CmbError::Format { offset, .. }) => assert_eq!(offset, bytes.len() as u64),
            other => panic!("{other:?}"),
        }
        let mut bad = write_cmbt_bytes(&t);
        bad[4] = 9;
        assert!(matches!(read_cmbt_bytes(&bad), Err(CmbError::Format { offset: 4, .. })));
        assert!(matches!(read_cmbt_bytes(b"XXXX"), Err(CmbError::Format { offset: 0, .. })));
    }
}
