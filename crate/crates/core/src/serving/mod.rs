//! Digest-gated embedding refresh over a replayed update stream, the
//! binary embedding store and its atomic swap.

mod digest;
mod ingest;
mod store;

pub use digest::{digest, digest_bytes, DigestCache};
pub use ingest::{
    bench_ingest, ingest, ingest_files, read_events, write_events, BenchReport, Embedder,
    IngestStats, UpdateEvent,
};
pub use store::{swap_store, EmbeddingStore, STORE_FORMAT, STORE_MAGIC};
