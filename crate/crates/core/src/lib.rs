//! Text-pair embeddings, heterogeneous-graph link prediction, backward
//! compatible embedding versions and a digest-gated serving pipeline.

pub mod error;
pub mod eval;
pub mod gnn;
pub mod graph;
pub mod io_util;
pub mod lifecycle;
pub mod numeric;
pub mod serving;
pub mod text;

pub use error::{Error, Result};
