//! Binary tensor files: `CTNS`, version byte, rank byte, little-endian u64 extents,
//! little-endian f64 payload.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CTNS";
pub const VERSION: u8 = 1;

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::Format(format!("rank {} does not fit in a byte", t.rank())))?;
    let mut out = Vec::with_capacity(6 + 8 * t.rank() + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(rank);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut r = bytes;
    let mut head = [0u8; 6];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format("truncated CTNS header".into()))?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad CTNS magic".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported CTNS version {}", head[4])));
    }
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut word = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut word)
            .map_err(|_| Error::Format("truncated CTNS extents".into()))?;
        shape.push(u64::from_le_bytes(word) as usize);
    }
    let n: usize = shape.iter().product();
    if r.len() != 8 * n {
        return Err(Error::Format(format!(
            "CTNS payload has {} bytes, shape {:?} needs {}",
            r.len(),
            shape,
            8 * n
        )));
    }
    let data = r
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    let bytes = encode(t)?;
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
