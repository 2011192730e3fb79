//! `DKT1` tensor files: magic, `u32` rank, `u32` dims, then `f64` values,
//! all little-endian, row-major.

use super::Tensor;
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"DKT1";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Parse {
            line: 0,
            msg: format!("truncated tensor file while reading {what}"),
        });
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

pub fn decode(mut bytes: &[u8]) -> Result<Tensor> {
    let magic = take(&mut bytes, 4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse {
            line: 0,
            msg: "bad magic, expected DKT1".into(),
        });
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let rank = u32_at(take(&mut bytes, 4, "rank")?) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32_at(take(&mut bytes, 4, "dims")?) as usize);
    }
    let numel: usize = shape.iter().product();
    let raw = take(&mut bytes, numel * 8, "values")?;
    if !bytes.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: format!("{} trailing bytes after tensor", bytes.len()),
        });
    }
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, values)
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Tensor> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}
