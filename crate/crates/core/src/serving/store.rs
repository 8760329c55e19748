//! Layout (little endian):
//! `"STES" | format u32 | version_id u32 | dim u32 | count u64 |
//!  count × (key u64, dim × f32) sorted by key | crc32 u32`
//! where the CRC covers every preceding byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{self, Reader};

pub const STORE_MAGIC: &[u8; 4] = b"STES";
pub const STORE_FORMAT: u32 = 1;

/// Immutable-on-disk key → vector store. A loaded store is a private
/// snapshot; later swaps of the file do not affect it.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    version_id: u32,
    dim: usize,
    records: BTreeMap<u64, Vec<f32>>,
}

impl EmbeddingStore {
    pub fn new(version_id: u32, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("store dim must be positive"));
        }
        Ok(Self {
            version_id,
            dim,
            records: BTreeMap::new(),
        })
    }

    pub fn version_id(&self) -> u32 {
        self.version_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, key: u64) -> bool {
        self.records.contains_key(&key)
    }

    /// Exact stored vector, or `None` when the key was never written.
    pub fn lookup(&self, key: u64) -> Option<&[f32]> {
        self.records.get(&key).map(Vec::as_slice)
    }

    pub fn upsert(&mut self, key: u64, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Shape {
                op: "store upsert",
                lhs: vec![self.dim],
                rhs: vec![vector.len()],
            });
        }
        self.records.insert(key, vector);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[f32])> {
        self.records.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.records.len() * (8 + 4 * self.dim) + 4);
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_FORMAT.to_le_bytes());
        out.extend_from_slice(&self.version_id.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for (k, v) in &self.records {
            out.extend_from_slice(&k.to_le_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Format {
            what: "embedding store",
            message: m,
        };
        if bytes.len() < 28 {
            return Err(bad(format!("{} bytes is too short for a store", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if &body[..4] != STORE_MAGIC {
            return Err(bad("bad magic".into()));
        }
        if stored != computed {
            return Err(Error::Checksum {
                what: "embedding store",
                stored,
                computed,
            });
        }
        let mut r = Reader::new(&body[4..], "embedding store");
        let format = r.u32()?;
        if format != STORE_FORMAT {
            return Err(bad(format!("unsupported format {format}")));
        }
        let version_id = r.u32()?;
        let dim = r.u32()? as usize;
        let count = r.u64()?;
        if dim == 0 {
            return Err(bad("zero dim".into()));
        }
        let mut records = BTreeMap::new();
        let mut last = None;
        for _ in 0..count {
            let k = r.u64()?;
            if last.is_some_and(|l| l >= k) {
                return Err(bad(format!("keys out of order at {k}")));
            }
            last = Some(k);
            let v = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            records.insert(k, v);
        }
        if !r.is_done() {
            return Err(bad("trailing bytes after records".into()));
        }
        Ok(Self {
            version_id,
            dim,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io_util::write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).inspect_err(|e| log::error!("refusing store {}: {e}", path.display()))
    }
}

/// Publishes `staged` as `current` by rename. The staged file is validated
/// first and consumed by the swap, so swapping it twice fails.
pub fn swap_store(current: &Path, staged: &Path) -> Result<()> {
    if !staged.exists() {
        return Err(Error::NotFound(format!(
            "staged store {} (already swapped?)",
            staged.display()
        )));
    }
    EmbeddingStore::load(staged)?;
    fs::rename(staged, current).map_err(|e| Error::io(current, e))?;
    if let Some(dir) = current.parent().filter(|d| !d.as_os_str().is_empty()) {
        // Persist the rename itself; not every platform allows syncing a directory.
        if let Ok(d) = fs::File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}
