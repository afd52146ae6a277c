//! Shared domain types: token sequences, sensitivity masks, requests, and
//! coarse segmentation of a prompt by its mask.
//!
//! All algorithmic formulas in this crate use 1-based inclusive indices; the
//! conversion to Rust's 0-based storage happens exactly once, at the slice
//! boundary (`TokenSeq::slice1` and friends), so the formulas elsewhere read
//! the same way they are usually written.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Identifier of a token drawn from a finite vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    /// Field value used by the polynomial hash: `id + 1`, so token 0 is not
    /// an absorbing element.
    #[inline]
    pub fn field_value(self) -> u64 {
        u64::from(self.0) + 1
    }
}

impl std::fmt::Display for TokenId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An ordered token sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        TokenSeq(tokens)
    }

    pub fn from_u32(ids: impl IntoIterator<Item = u32>) -> Self {
        TokenSeq(ids.into_iter().map(TokenId).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Token at 1-based position `i`.
    #[inline]
    pub fn at1(&self, i: usize) -> TokenId {
        self.0[i - 1]
    }

    /// Tokens of the 1-based inclusive span `[l, r]`.
    #[inline]
    pub fn slice1(&self, l: usize, r: usize) -> &[TokenId] {
        &self.0[l - 1..r]
    }

    pub fn as_slice(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(ids: Vec<u32>) -> Self {
        TokenSeq::from_u32(ids)
    }
}

/// Binary per-token sensitivity mask aligned with a [`TokenSeq`].
/// Bit `i` (1-based) set means token `i` is sensitive.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SensitivityMask(pub Vec<bool>);

impl SensitivityMask {
    pub fn all_clear(n: usize) -> Self {
        SensitivityMask(vec![false; n])
    }

    pub fn all_set(n: usize) -> Self {
        SensitivityMask(vec![true; n])
    }

    pub fn from_bits(bits: impl IntoIterator<Item = u8>) -> Self {
        SensitivityMask(bits.into_iter().map(|b| b != 0).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Mask bit at 1-based position `i`.
    #[inline]
    pub fn at1(&self, i: usize) -> bool {
        self.0[i - 1]
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// True if `self` is bitwise ≤ `other` (every bit set here is set there).
    pub fn is_subset_of(&self, other: &SensitivityMask) -> bool {
        self.len() == other.len() && self.0.iter().zip(&other.0).all(|(&a, &b)| !a || b)
    }
}

/// Coarse region of a prompt, used by strict masking policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    System,
    Public,
    User,
}

/// A request as it enters the engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub request_id: String,
    /// Session identity; same-user requests may share cache without restriction.
    pub user_id: String,
    pub tokens: TokenSeq,
    pub region_labels: Vec<Region>,
    /// Ground-truth mask, when the caller already knows sensitivity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_override: Option<SensitivityMask>,
}

impl Request {
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if self.region_labels.len() != n {
            return Err(Error::LengthMismatch {
                context: "request region_labels",
                expected: n,
                actual: self.region_labels.len(),
            });
        }
        if let Some(m) = &self.mask_override {
            if m.len() != n {
                return Err(Error::LengthMismatch {
                    context: "request mask_override",
                    expected: n,
                    actual: m.len(),
                });
            }
        }
        Ok(())
    }
}

/// Maximal run of non-sensitive tokens, bounded by sensitive tokens or the
/// prompt edges. Indices are 1-based inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoarseSegment {
    pub a: usize,
    pub b: usize,
}

impl CoarseSegment {
    pub fn len(&self) -> usize {
        self.b - self.a + 1
    }

    pub fn is_empty(&self) -> bool {
        false // a <= b by construction
    }
}

/// Candidate reusable span inside a coarse segment, with its
/// intra-minus-inter attention score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentSpan {
    pub l: usize,
    pub r: usize,
    pub score: f64,
}

impl SegmentSpan {
    pub fn len(&self) -> usize {
        self.r - self.l + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Partitions the prompt into maximal runs of mask-0 tokens. Sensitive tokens
/// act as separators and are not part of any segment.
///
/// Returned segments are in ascending order, non-overlapping, and cover
/// exactly the mask-0 positions.
pub fn coarse_segments(tokens: &TokenSeq, mask: &SensitivityMask) -> Result<Vec<CoarseSegment>> {
    if tokens.len() != mask.len() {
        return Err(Error::LengthMismatch {
            context: "coarse_segments mask",
            expected: tokens.len(),
            actual: mask.len(),
        });
    }
    let n = tokens.len();
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for i in 1..=n {
        if mask.at1(i) {
            if let Some(a) = start.take() {
                out.push(CoarseSegment { a, b: i - 1 });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(a) = start {
        out.push(CoarseSegment { a, b: n });
    }
    Ok(out)
}

/// Vocabulary mapping for the demo whitespace tokenizer.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Vocab {
    pub words: BTreeMap<String, u32>,
    /// Reserved id for out-of-vocabulary words.
    pub oov_id: u32,
}

impl Vocab {
    pub fn new(words: BTreeMap<String, u32>, oov_id: u32) -> Self {
        Vocab { words, oov_id }
    }
}

/// Whitespace tokenizer for demo workloads. Unknown words map to the
/// reserved OOV id; the result is deterministic for a fixed vocabulary.
pub fn tokenize_text(text: &str, vocab: &Vocab) -> TokenSeq {
    TokenSeq(
        text.split_whitespace()
            .map(|w| TokenId(*vocab.words.get(w).unwrap_or(&vocab.oov_id)))
            .collect(),
    )
}
