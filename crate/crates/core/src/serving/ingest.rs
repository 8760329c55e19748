use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{digest, swap_store, DigestCache, EmbeddingStore};
use crate::error::{Error, Result};
use crate::io_util;
use crate::text::{BiEncoder, TextKind, TextRecord};

const EMBED_CHUNK: usize = 256;

/// One text update from the replayed stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateEvent {
    pub entity_id: u64,
    pub kind: TextKind,
    pub text: String,
    pub event_time: i64,
}

impl UpdateEvent {
    pub fn key(&self) -> Result<u64> {
        self.kind.key(self.entity_id)
    }

    pub fn record(&self) -> TextRecord {
        TextRecord {
            entity_id: self.entity_id,
            kind: self.kind,
            text: self.text.clone(),
            snapshot_time: Some(self.event_time),
        }
    }
}

/// JSON lines in stream order; blank lines are skipped.
pub fn read_events(path: &Path) -> Result<Vec<UpdateEvent>> {
    let text = io_util::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ev: UpdateEvent =
            serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        ev.key().map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        out.push(ev);
    }
    Ok(out)
}

pub fn write_events(path: &Path, events: &[UpdateEvent]) -> Result<()> {
    let mut s = String::new();
    for e in events {
        s.push_str(&serde_json::to_string(e)?);
        s.push('\n');
    }
    io_util::write_atomic(path, s.as_bytes())
}

/// Frozen text encoder used to refresh store entries.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed_batch(&self, records: &[TextRecord]) -> Result<Vec<Vec<f32>>>;
}

impl Embedder for BiEncoder {
    fn dim(&self) -> usize {
        self.config().dim
    }

    fn embed_batch(&self, records: &[TextRecord]) -> Result<Vec<Vec<f32>>> {
        Ok(self
            .embed_many(records)?
            .into_iter()
            .map(|v| v.into_iter().map(|x| x as f32).collect())
            .collect())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub total: usize,
    /// Events whose digest differed from the last one seen for the record.
    pub computed: usize,
    pub skipped: usize,
    /// Distinct records whose stored vector was rewritten.
    pub updated_entities: usize,
}

/// Applies `events` in order. An event is skipped when its digest equals
/// the latest digest for the same record (cached and stored, or earlier in
/// this batch). For records updated several times the last text wins.
/// On error neither `cache` nor `store` is modified.
pub fn ingest(
    events: &[UpdateEvent],
    cache: &mut DigestCache,
    embedder: &dyn Embedder,
    store: &mut EmbeddingStore,
) -> Result<IngestStats> {
    if embedder.dim() != store.dim() {
        return Err(Error::invalid(format!(
            "encoder dim {} does not match store dim {}",
            embedder.dim(),
            store.dim()
        )));
    }
    let mut stats = IngestStats {
        total: events.len(),
        ..IngestStats::default()
    };
    let mut pending: BTreeMap<u64, (String, &UpdateEvent)> = BTreeMap::new();
    for ev in events {
        let key = ev.key()?;
        let d = digest(&ev.text);
        let current = match pending.get(&key) {
            Some((p, _)) => Some(p.as_str()),
            None => cache.get(key).filter(|_| store.contains(key)),
        };
        if current == Some(d.as_str()) {
            stats.skipped += 1;
        } else {
            stats.computed += 1;
            pending.insert(key, (d, ev));
        }
    }

    let mut staged_store = store.clone();
    let mut staged_cache = cache.clone();
    let items: Vec<_> = pending.into_iter().collect();
    for chunk in items.chunks(EMBED_CHUNK) {
        let records: Vec<TextRecord> = chunk.iter().map(|(_, (_, ev))| ev.record()).collect();
        let vectors = embedder.embed_batch(&records)?;
        for ((key, (d, _)), v) in chunk.iter().zip(vectors) {
            staged_store.upsert(*key, v)?;
            staged_cache.insert(*key, d.clone());
        }
    }
    stats.updated_entities = items.len();
    *store = staged_store;
    *cache = staged_cache;
    Ok(stats)
}

fn staged_path(store: &Path) -> PathBuf {
    let mut name = store.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".staged");
    store.with_file_name(name)
}

/// File-level ingest. The new store is written to a staged file and
/// swapped in; the cache is written only after the swap succeeds, so a
/// failure at any point leaves both files as they were. Nothing is
/// rewritten when every event is skipped.
pub fn ingest_files(
    events_path: &Path,
    cache_path: &Path,
    embedder: &dyn Embedder,
    store_path: &Path,
    version_id: u32,
) -> Result<IngestStats> {
    let events = read_events(events_path)?;
    let mut cache = DigestCache::load(cache_path)?;
    let mut store = if store_path.exists() {
        let s = EmbeddingStore::load(store_path)?;
        if s.version_id() != version_id {
            return Err(Error::invalid(format!(
                "store holds version {}, ingest targets version {version_id}; use a fresh store and cache",
                s.version_id()
            )));
        }
        s
    } else {
        EmbeddingStore::new(version_id, embedder.dim())?
    };
    let stats = ingest(&events, &mut cache, embedder, &mut store)?;
    if stats.computed == 0 {
        return Ok(stats);
    }
    let staged = staged_path(store_path);
    let published = store.save(&staged).and_then(|_| swap_store(store_path, &staged));
    if let Err(e) = published {
        let _ = fs::remove_file(&staged);
        return Err(e);
    }
    cache.save(cache_path)?;
    Ok(stats)
}

/// Wall-clock figures for embedding each event on its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub events: usize,
    pub seconds: f64,
    pub events_per_sec: f64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

pub fn bench_ingest(events: &[UpdateEvent], embedder: &dyn Embedder) -> Result<BenchReport> {
    if events.is_empty() {
        return Err(Error::invalid("no events to benchmark"));
    }
    let start = Instant::now();
    let mut lat = Vec::with_capacity(events.len());
    for ev in events {
        let t = Instant::now();
        let _ = digest(&ev.text);
        embedder.embed_batch(std::slice::from_ref(&ev.record()))?;
        lat.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let seconds = start.elapsed().as_secs_f64();
    lat.sort_by(f64::total_cmp);
    let pct = |p: f64| lat[((lat.len() - 1) as f64 * p).round() as usize];
    Ok(BenchReport {
        events: events.len(),
        seconds,
        events_per_sec: events.len() as f64 / seconds.max(1e-12),
        mean_ms: lat.iter().sum::<f64>() / lat.len() as f64,
        p50_ms: pct(0.5),
        p95_ms: pct(0.95),
    })
}
