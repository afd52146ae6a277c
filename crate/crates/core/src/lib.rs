//! Token-granular, privacy-aware KV-cache segment sharing.
//!
//! The engine derives reusable cache segments from attention statistics
//! under a per-token sensitivity mask, retrieves variable-length segments
//! with rolling hashes, and manages a deduplicated LRU segment pool. A
//! simulation kit reproduces the privacy and efficiency behavior at desk
//! scale without any real model: sensitive tokens are never stored, so
//! reuse-based probing cannot recover them, while non-sensitive spans stay
//! shareable across users at token granularity.

pub mod annotator;
pub mod detector;
pub mod error;
pub mod hashing;
pub mod pool;
pub mod retriever;
pub mod sat;
pub mod sim;
pub mod types;

pub use annotator::{annotate_request, AnnotatorConfig, ReusableSegment, SegmentOrigin};
pub use error::{Error, Result};
pub use hashing::{Digest256, HashParams};
pub use pool::{EntryId, InsertOutcome, KvPool, PoolConfig, PoolEntry};
pub use retriever::{Assignment, AssignmentSource, MatchPlan, Retriever, SharingPolicy};
pub use sat::{build_in_place, AttentionMatrix, SummedAreaTable};
pub use types::{
    coarse_segments, tokenize_text, CoarseSegment, Region, Request, SegmentSpan, SensitivityMask,
    TokenId, TokenSeq, Vocab,
};
