//! Named-tensor container ("STNC").
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "STNC" | version u32 = 1 | entry count u64
//! per entry: name length u32 | UTF-8 name | rank u32 | extents u64 × rank | f64 × product(extents)
//! ```
//!
//! Entries are written in name order so equal maps serialize identically.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{write_atomic, Reader};
use crate::numeric::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"STNC";
pub const VERSION: u32 = 1;

pub fn encode(entries: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    const WHAT: &str = "checkpoint";
    let mut r = Reader::new(bytes, WHAT);
    if r.take(4)? != MAGIC {
        return Err(Error::format(WHAT, "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(WHAT, format!("unsupported version {version}")));
    }
    let count = r.u64()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::format(WHAT, format!("entry name: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f64()?);
        }
        out.insert(name, Tensor::new(shape, data)?);
    }
    if !r.is_done() {
        return Err(Error::format(WHAT, "trailing bytes"));
    }
    Ok(out)
}

pub fn save(path: &Path, entries: &BTreeMap<String, Tensor>) -> Result<()> {
    write_atomic(path, &encode(entries))
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
