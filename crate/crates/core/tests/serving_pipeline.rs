use std::cell::Cell;
use std::collections::BTreeMap;

use proptest::prelude::*;
use star_core::serving::{
    digest, ingest, ingest_files, read_events, swap_store, write_events, DigestCache, Embedder,
    EmbeddingStore, UpdateEvent,
};
use star_core::text::{BiEncoder, EncoderConfig, TextKind, TextRecord};

/// Vector derived from the text digest; counts calls.
struct HashEmbedder {
    calls: Cell<usize>,
    fail: bool,
}

impl HashEmbedder {
    fn new() -> Self {
        Self {
            calls: Cell::new(0),
            fail: false,
        }
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        4
    }
    fn embed_batch(&self, records: &[TextRecord]) -> star_core::Result<Vec<Vec<f32>>> {
        if self.fail {
            return Err(star_core::Error::InvalidArgument("encoder offline".into()));
        }
        self.calls.set(self.calls.get() + records.len());
        Ok(records
            .iter()
            .map(|r| {
                let d = digest(&r.prompt());
                (0..4)
                    .map(|i| u8::from_str_radix(&d[2 * i..2 * i + 2], 16).unwrap() as f32 / 255.0)
                    .collect()
            })
            .collect())
    }
}

fn ev(id: u64, kind: TextKind, text: &str, t: i64) -> UpdateEvent {
    UpdateEvent {
        entity_id: id,
        kind,
        text: text.into(),
        event_time: t,
    }
}

fn job(id: u64, text: &str) -> UpdateEvent {
    ev(id, TextKind::JobDescription, text, id as i64)
}

#[test]
fn replayed_event_is_skipped() {
    let e = HashEmbedder::new();
    let mut cache = DigestCache::new();
    let mut store = EmbeddingStore::new(1, 4).unwrap();
    let events = vec![job(1, "rust engineer"), job(1, "rust engineer")];
    let s = ingest(&events, &mut cache, &e, &mut store).unwrap();
    assert_eq!((s.computed, s.skipped, s.updated_entities), (1, 1, 1));
    let again = ingest(&events[..1], &mut cache, &e, &mut store).unwrap();
    assert_eq!((again.computed, again.skipped), (0, 1));
    assert_eq!(e.calls.get(), 1);
}

#[test]
fn thirty_percent_unchanged_are_skipped() {
    let e = HashEmbedder::new();
    let mut cache = DigestCache::new();
    let mut store = EmbeddingStore::new(1, 4).unwrap();
    let first: Vec<_> = (0..100).map(|i| job(i, &format!("job {i} v1"))).collect();
    ingest(&first, &mut cache, &e, &mut store).unwrap();
    let replay: Vec<_> = (0..100)
        .map(|i| {
            if i % 10 < 3 {
                job(i, &format!("job {i} v1"))
            } else {
                job(i, &format!("job {i} v2"))
            }
        })
        .collect();
    let s = ingest(&replay, &mut cache, &e, &mut store).unwrap();
    assert_eq!(s.skipped, 30);
    assert_eq!(s.computed, 70);
    assert_eq!(s.skipped as f64 / s.total as f64, 0.3);
}

#[test]
fn profile_and_resume_are_separate_records() {
    let e = HashEmbedder::new();
    let mut cache = DigestCache::new();
    let mut store = EmbeddingStore::new(1, 4).unwrap();
    let events = vec![
        ev(5, TextKind::MemberProfile, "same text", 1),
        ev(5, TextKind::MemberResume, "same text", 2),
    ];
    let s = ingest(&events, &mut cache, &e, &mut store).unwrap();
    assert_eq!(s.computed, 2);
    assert_eq!(store.len(), 2);
    // The prompt prefix differs, so the vectors differ too.
    assert_ne!(
        store.lookup(TextKind::MemberProfile.key(5).unwrap()),
        store.lookup(TextKind::MemberResume.key(5).unwrap())
    );
}

#[test]
fn latest_event_wins() {
    let e = HashEmbedder::new();
    let mut cache = DigestCache::new();
    let mut store = EmbeddingStore::new(1, 4).unwrap();
    let events = vec![job(3, "a"), job(3, "b"), job(3, "a"), job(3, "c")];
    let s = ingest(&events, &mut cache, &e, &mut store).unwrap();
    assert_eq!((s.computed, s.skipped, s.updated_entities), (4, 0, 1));
    let key = TextKind::JobDescription.key(3).unwrap();
    let want = e.embed_batch(&[job(3, "c").record()]).unwrap().remove(0);
    assert_eq!(store.lookup(key).unwrap(), want.as_slice());
    assert_eq!(cache.get(key), Some(digest("c").as_str()));
}

#[test]
fn failed_embedding_leaves_state_untouched() {
    let good = HashEmbedder::new();
    let mut cache = DigestCache::new();
    let mut store = EmbeddingStore::new(1, 4).unwrap();
    ingest(&[job(1, "x")], &mut cache, &good, &mut store).unwrap();
    let (c0, s0) = (cache.clone(), store.clone());
    let bad = HashEmbedder {
        calls: Cell::new(0),
        fail: true,
    };
    assert!(ingest(&[job(1, "y"), job(2, "z")], &mut cache, &bad, &mut store).is_err());
    assert_eq!(cache, c0);
    assert_eq!(store, s0);
}

#[test]
fn empty_event_file_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (events, cache, store) = (dir.path().join("e.jsonl"), dir.path().join("c.tsv"), dir.path().join("s.stes"));
    write_events(&events, &[job(1, "hello")]).unwrap();
    let e = HashEmbedder::new();
    ingest_files(&events, &cache, &e, &store, 1).unwrap();
    let (cb, sb) = (std::fs::read(&cache).unwrap(), std::fs::read(&store).unwrap());
    std::fs::write(&events, "").unwrap();
    let s = ingest_files(&events, &cache, &e, &store, 1).unwrap();
    assert_eq!((s.total, s.computed, s.skipped, s.updated_entities), (0, 0, 0, 0));
    assert_eq!(std::fs::read(&cache).unwrap(), cb);
    assert_eq!(std::fs::read(&store).unwrap(), sb);
}

#[test]
fn failed_store_write_keeps_cache_and_store() {
    let dir = tempfile::tempdir().unwrap();
    let (events, cache, store) = (dir.path().join("e.jsonl"), dir.path().join("c.tsv"), dir.path().join("s.stes"));
    let e = HashEmbedder::new();
    write_events(&events, &[job(1, "one")]).unwrap();
    ingest_files(&events, &cache, &e, &store, 1).unwrap();
    let (cb, sb) = (std::fs::read(&cache).unwrap(), std::fs::read(&store).unwrap());
    // A directory where the staged file should go makes the write fail.
    std::fs::create_dir(dir.path().join("s.stes.staged")).unwrap();
    write_events(&events, &[job(1, "two"), job(2, "three")]).unwrap();
    assert!(ingest_files(&events, &cache, &e, &store, 1).is_err());
    assert_eq!(std::fs::read(&cache).unwrap(), cb);
    assert_eq!(std::fs::read(&store).unwrap(), sb);
    std::fs::remove_dir(dir.path().join("s.stes.staged")).unwrap();
    let s = ingest_files(&events, &cache, &e, &store, 1).unwrap();
    assert_eq!(s.computed, 2);
    assert!(ingest_files(&events, &cache, &e, &store, 2).is_err(), "version mismatch");
}

#[test]
fn cache_and_store_agree_after_file_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let (events, cache, store) = (dir.path().join("e.jsonl"), dir.path().join("c.tsv"), dir.path().join("s.stes"));
    let list: Vec<_> = (0..20)
        .map(|i| ev(i % 7, TextKind::ALL[(i % 3) as usize], &format!("t{}", i % 5), i as i64))
        .collect();
    write_events(&events, &list).unwrap();
    assert_eq!(read_events(&events).unwrap(), list);
    ingest_files(&events, &cache, &HashEmbedder::new(), &store, 1).unwrap();
    let c = DigestCache::load(&cache).unwrap();
    let s = EmbeddingStore::load(&store).unwrap();
    assert!(!c.is_empty());
    assert_eq!(c.keys().collect::<Vec<_>>(), s.iter().map(|r| r.0).collect::<Vec<_>>());
}

#[test]
fn bad_event_line_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e.jsonl");
    std::fs::write(
        &p,
        "{\"entity_id\":1,\"kind\":\"job_description\",\"text\":\"a\",\"event_time\":0}\n{\"entity_id\":2}\n",
    )
    .unwrap();
    let err = read_events(&p).unwrap_err().to_string();
    assert!(err.contains(":2:"), "{err}");
}

#[test]
fn real_encoder_ingest() {
    let model = BiEncoder::new(
        EncoderConfig {
            vocab_size: 512,
            dim: 8,
            layers: 1,
            max_tokens: 16,
            head_hidden: 4,
        },
        3,
    )
    .unwrap();
    let mut cache = DigestCache::new();
    let mut store = EmbeddingStore::new(1, 8).unwrap();
    let events = vec![job(1, "data scientist"), ev(1, TextKind::MemberProfile, "ml engineer", 0)];
    ingest(&events, &mut cache, &model, &mut store).unwrap();
    let want: Vec<f32> = model.embed(&events[0].record()).unwrap().iter().map(|&x| x as f32).collect();
    assert_eq!(store.lookup(TextKind::JobDescription.key(1).unwrap()).unwrap(), want.as_slice());
}

#[test]
fn lookup_absent_and_exact() {
    let mut s = EmbeddingStore::new(3, 2).unwrap();
    s.upsert(10, vec![1.5, -0.0]).unwrap();
    assert_eq!(s.lookup(10).unwrap(), &[1.5, -0.0]);
    assert!(s.lookup(11).is_none());
    assert!(s.upsert(12, vec![1.0]).is_err());
}

#[test]
fn corrupted_store_is_refused() {
    let mut s = EmbeddingStore::new(1, 3).unwrap();
    for k in 0..10 {
        s.upsert(k, vec![k as f32, 0.5, -1.0]).unwrap();
    }
    let bytes = s.encode();
    let truncated = &bytes[..bytes.len() - 7];
    let err = EmbeddingStore::decode(truncated).unwrap_err().to_string();
    assert!(err.contains("checksum"), "{err}");
    let mut flipped = bytes.clone();
    flipped[40] ^= 1;
    assert!(EmbeddingStore::decode(&flipped).unwrap_err().to_string().contains("checksum"));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(EmbeddingStore::decode(&magic).is_err());
    assert!(EmbeddingStore::decode(&bytes[..10]).is_err());
}

#[test]
fn swap_preserves_reader_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let current = dir.path().join("store.stes");
    let staged = dir.path().join("store.stes.next");
    let mut v1 = EmbeddingStore::new(1, 2).unwrap();
    v1.upsert(7, vec![1.0, 1.0]).unwrap();
    v1.save(&current).unwrap();
    let reader_a = EmbeddingStore::load(&current).unwrap();

    let mut v2 = EmbeddingStore::new(2, 2).unwrap();
    v2.upsert(7, vec![2.0, 2.0]).unwrap();
    v2.save(&staged).unwrap();
    swap_store(&current, &staged).unwrap();
    let reader_b = EmbeddingStore::load(&current).unwrap();
    assert_eq!(reader_a.lookup(7).unwrap(), &[1.0, 1.0]);
    assert_eq!(reader_b.lookup(7).unwrap(), &[2.0, 2.0]);
    // A later process sees the swapped store.
    assert_eq!(EmbeddingStore::load(&current).unwrap().version_id(), 2);
    assert!(swap_store(&current, &staged).is_err());

    std::fs::write(&staged, b"garbage").unwrap();
    assert!(swap_store(&current, &staged).is_err());
    assert_eq!(EmbeddingStore::load(&current).unwrap(), v2);
}

proptest! {
    #[test]
    fn store_round_trip_is_bit_exact(
        bits in proptest::collection::vec(any::<u32>(), 0..60),
        version in any::<u32>(),
    ) {
        let mut s = EmbeddingStore::new(version, 3).unwrap();
        let finite: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).filter(|x| x.is_finite()).collect();
        for (i, c) in finite.chunks_exact(3).enumerate() {
            s.upsert(i as u64 * 977, c.to_vec()).unwrap();
        }
        let back = EmbeddingStore::decode(&s.encode()).unwrap();
        prop_assert_eq!(back.len(), s.len());
        for (k, v) in s.iter() {
            let got = back.lookup(k).unwrap();
            prop_assert!(got.iter().zip(v).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        prop_assert_eq!(back.encode(), s.encode());
    }

    #[test]
    fn counts_add_up_and_skips_ignore_cross_entity_order(
        raw in proptest::collection::vec((0u64..5, 0usize..3, 0u8..3), 0..40),
        rotate in 0usize..40,
    ) {
        let events: Vec<_> = raw
            .iter()
            .enumerate()
            .map(|(i, &(id, k, t))| ev(id, TextKind::ALL[k], &format!("text {t}"), i as i64))
            .collect();
        let run = |events: &[UpdateEvent]| {
            let mut cache = DigestCache::new();
            let mut store = EmbeddingStore::new(1, 4).unwrap();
            let e = HashEmbedder::new();
            let s = ingest(events, &mut cache, &e, &mut store).unwrap();
            (s, cache, store)
        };
        let (s, cache, store) = run(&events);
        prop_assert_eq!(s.computed + s.skipped, s.total);
        prop_assert_eq!(s.total, events.len());

        // Interleave records differently while keeping each record's own order.
        let mut by_key: BTreeMap<u64, Vec<UpdateEvent>> = BTreeMap::new();
        for e in &events {
            by_key.entry(e.key().unwrap()).or_default().push(e.clone());
        }
        let mut groups: Vec<_> = by_key.into_values().collect();
        if !groups.is_empty() {
            let r = rotate % groups.len();
            groups.rotate_left(r);
        }
        let reordered: Vec<_> = groups.into_iter().flatten().collect();
        let (s2, cache2, store2) = run(&reordered);
        prop_assert_eq!(s, s2);
        prop_assert_eq!(cache, cache2);
        prop_assert_eq!(store, store2);
    }
}
