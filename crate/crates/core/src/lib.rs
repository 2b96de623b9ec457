//! Corpus curation toolkit: JSONL ingestion, exact and MinHash/LSH
//! deduplication within and across corpora, quality cleaning that keeps
//! long documents, byte-level BPE training, long-document statistics and
//! token-based evaluation metrics.

pub mod bpe;
pub mod clean;
pub mod corpus;
pub mod dedup;
pub mod error;
pub mod metrics;
pub mod minhash;
pub mod pipeline;

pub use corpus::{Document, StageStats};
pub use error::{Error, Result};
pub use minhash::{MinHashParams, Signature};
