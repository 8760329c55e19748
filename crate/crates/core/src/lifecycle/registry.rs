use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VersionStatus {
    Active,
    Deprecated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVersion {
    pub version_id: u32,
    pub dim: usize,
    /// Caller-supplied timestamp (seconds), kept out of the library so
    /// runs stay reproducible.
    pub created_at: i64,
    pub model_checksum: String,
    pub status: VersionStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub from_version: u32,
    pub to_version: u32,
    /// Path of the weight checkpoint, relative to the registry file.
    pub weights: String,
    pub residual_rms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub versions: Vec<EmbeddingVersion>,
    pub transforms: Vec<TransformRecord>,
}

impl Registry {
    pub fn get(&self, id: u32) -> Option<&EmbeddingVersion> {
        self.versions.iter().find(|v| v.version_id == id)
    }

    pub fn newest(&self) -> Option<&EmbeddingVersion> {
        self.versions.last()
    }

    pub fn newest_active(&self) -> Option<&EmbeddingVersion> {
        self.versions.iter().rev().find(|v| v.status == VersionStatus::Active)
    }

    pub fn register_version(&mut self, v: EmbeddingVersion) -> Result<()> {
        if self.get(v.version_id).is_some() {
            return Err(Error::Registry(format!("version {} is already registered", v.version_id)));
        }
        if let Some(last) = self.newest() {
            if v.version_id <= last.version_id {
                return Err(Error::Registry(format!(
                    "version ids must increase: {} after {}",
                    v.version_id, last.version_id
                )));
            }
        }
        if v.dim == 0 {
            return Err(Error::invalid("embedding dim must be positive"));
        }
        self.versions.push(v);
        Ok(())
    }

    /// Version registered immediately before `id`.
    pub fn predecessor(&self, id: u32) -> Option<u32> {
        let pos = self.versions.iter().position(|v| v.version_id == id)?;
        pos.checked_sub(1).map(|p| self.versions[p].version_id)
    }

    pub fn add_transform(&mut self, rec: TransformRecord) -> Result<()> {
        if self.predecessor(rec.from_version) != Some(rec.to_version) {
            return Err(Error::Registry(format!(
                "transform {}→{} must map a registered version to its predecessor",
                rec.from_version, rec.to_version
            )));
        }
        self.transforms
            .retain(|t| !(t.from_version == rec.from_version && t.to_version == rec.to_version));
        self.transforms.push(rec);
        Ok(())
    }

    fn transform(&self, from: u32, to: u32) -> Option<&TransformRecord> {
        self.transforms
            .iter()
            .find(|t| t.from_version == from && t.to_version == to)
    }

    /// Transforms leading from `from` down to `to`, newest first.
    pub fn chain(&self, from: u32, to: u32) -> Result<Vec<&TransformRecord>> {
        let mut out = Vec::new();
        let mut cur = from;
        while cur != to {
            let prev = self
                .predecessor(cur)
                .filter(|&p| p >= to)
                .ok_or_else(|| Error::Registry(format!("version {to} is not below {from}")))?;
            let t = self
                .transform(cur, prev)
                .ok_or_else(|| Error::NotFound(format!("transform {cur}→{prev}")))?;
            out.push(t);
            cur = prev;
        }
        Ok(out)
    }

    /// Retires `id`. Consumers pinned to it must be able to read the newest
    /// active version through a chain of transforms, unless `force` is set.
    pub fn deprecate_version(&mut self, id: u32, force: bool) -> Result<()> {
        let status = self
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("version {id}")))?
            .status;
        if status == VersionStatus::Deprecated {
            return Err(Error::Registry(format!("version {id} is already deprecated")));
        }
        if !force {
            let newest = self.newest_active().map(|v| v.version_id).unwrap_or(id);
            if newest == id {
                return Err(Error::Registry(format!(
                    "version {id} is the newest active version; nothing newer to migrate to (use force)"
                )));
            }
            if let Err(e) = self.chain(newest, id) {
                return Err(Error::Registry(format!(
                    "cannot deprecate version {id}: no transform chain from version {newest} ({e}); fit the missing transform or use force"
                )));
            }
        }
        for v in &mut self.versions {
            if v.version_id == id {
                v.status = VersionStatus::Deprecated;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Registry persisted as JSON. Writers take an exclusive advisory lock on
/// a sibling `.lock` file and replace the registry atomically, so readers
/// always see the last committed snapshot.
#[derive(Clone, Debug)]
pub struct RegistryFile {
    path: PathBuf,
}

impl RegistryFile {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Resolves a weight path recorded relative to the registry.
    pub fn resolve(&self, rel: &str) -> PathBuf {
        match self.path.parent() {
            Some(dir) => dir.join(rel),
            None => PathBuf::from(rel),
        }
    }

    /// Missing file reads as an empty registry.
    pub fn read(&self) -> Result<Registry> {
        if !self.path.exists() {
            return Ok(Registry::default());
        }
        let text = io_util::read_to_string(&self.path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "registry",
            message: format!("{}: {e}", self.path.display()),
        })
    }

    pub fn update<T>(&self, f: impl FnOnce(&mut Registry) -> Result<T>) -> Result<T> {
        let _guard = self.lock()?;
        let mut reg = self.read()?;
        let out = f(&mut reg)?;
        io_util::write_atomic(&self.path, reg.to_json()?.as_bytes())?;
        Ok(out)
    }

    fn lock(&self) -> Result<File> {
        let mut lock_path = self.path.clone().into_os_string();
        lock_path.push(".lock");
        let lock_path = PathBuf::from(lock_path);
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(|e| Error::io(&lock_path, e))?;
        file.lock().map_err(|e| Error::io(&lock_path, e))?;
        Ok(file)
    }
}
