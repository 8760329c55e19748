use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use md5::{Digest, Md5};

use crate::error::{Error, Result};
use crate::io_util;
use crate::text::TextKind;

/// MD5 of the UTF-8 bytes as 32 lowercase hex characters.
pub fn digest(text: &str) -> String {
    digest_bytes(text.as_bytes())
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    let out = Md5::digest(bytes);
    let mut hex = String::with_capacity(32);
    for b in out {
        let _ = write!(hex, "{b:02x}");
    }
    hex
}

/// Last digest seen per text record, keyed by `TextKind::key`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DigestCache {
    entries: BTreeMap<u64, String>,
}

impl DigestCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: u64) -> Option<&str> {
        self.entries.get(&key).map(String::as_str)
    }

    pub fn insert(&mut self, key: u64, digest: String) {
        self.entries.insert(key, digest);
    }

    pub fn keys(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.keys().copied()
    }

    /// TSV lines `entity_id<TAB>kind<TAB>digest`, sorted by key.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("# entity_id\tkind\tmd5\n");
        for (&key, d) in &self.entries {
            let (kind, id) = TextKind::split_key(key).expect("cache keys are built from TextKind");
            let _ = writeln!(s, "{id}\t{}\t{d}", kind.as_str());
        }
        s
    }

    pub fn parse_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut cache = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| Error::parse(path, i + 1, m);
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(err(format!("expected 3 columns, found {}", cols.len())));
            }
            let id: u64 = cols[0].parse().map_err(|_| err(format!("bad entity id {:?}", cols[0])))?;
            let kind: TextKind = cols[1].parse().map_err(|e: Error| err(e.to_string()))?;
            let d = cols[2];
            if d.len() != 32 || !d.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
                return Err(err(format!("bad digest {d:?}")));
            }
            cache.insert(kind.key(id).map_err(|e| err(e.to_string()))?, d.to_owned());
        }
        Ok(cache)
    }

    /// A missing file is an empty cache.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::new());
        }
        Self::parse_tsv(&io_util::read_to_string(path)?, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io_util::write_atomic(path, self.to_tsv().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rfc1321_vectors() {
        let cases = [
            ("", "d41d8cd98f00b204e9800998ecf8427e"),
            ("a", "0cc175b9c0f1b6a831c399e269772661"),
            ("abc", "900150983cd24fb0d6963f7d28e17f72"),
            ("message digest", "f96b697d7cb7938d525a2f31aaf161d0"),
            ("abcdefghijklmnopqrstuvwxyz", "c3fcd3d76192e4007dfb496cca67e13b"),
            (
                "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789",
                "d174ab98d277d9f5a5611c2c9f419d9f",
            ),
            (
                "12345678901234567890123456789012345678901234567890123456789012345678901234567890",
                "57edf4a22be3c955ac49da2e2107b67a",
            ),
        ];
        for (input, want) in cases {
            assert_eq!(digest(input), want, "{input:?}");
        }
    }

    #[test]
    fn one_byte_changes_digest() {
        assert_ne!(digest("senior rust engineer"), digest("senior rust engineeR"));
    }

    #[test]
    fn tsv_round_trip() {
        let mut c = DigestCache::new();
        c.insert(TextKind::MemberResume.key(7).unwrap(), digest("x"));
        c.insert(TextKind::JobDescription.key(7).unwrap(), digest("y"));
        let back = DigestCache::parse_tsv(&c.to_tsv(), Path::new("c.tsv")).unwrap();
        assert_eq!(back, c);
        assert!(DigestCache::parse_tsv("1\tjob_description\tzz\n", Path::new("c.tsv")).is_err());
    }
}
