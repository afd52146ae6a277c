//! Derives the reusable span within each coarse segment, marks tokens for
//! recomputation, and packages segments with their retrieval hashes.
//!
//! Span selection maximizes intra-attention minus inter-attention over all
//! substrings of a coarse segment, each scored in O(1) from the summed-area
//! table. Ties prefer the longer span, then the leftmost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{digest_slice, Digest256, HashParams};
use crate::sat::{build_in_place, AttentionMatrix, SummedAreaTable};
use crate::types::{coarse_segments, CoarseSegment, Request, SegmentSpan, SensitivityMask, TokenSeq};

/// Attention scores are quantized to this grid before ranking, so that
/// mathematically tied scores (common on row-stochastic input) resolve by
/// the index tie-break identically regardless of summation order.
const SCORE_QUANTUM: f64 = 1e-9;

/// Snaps a score to the ranking grid.
pub fn quantize_score(score: f64) -> i64 {
    (score / SCORE_QUANTUM).round() as i64
}

/// Annotator knobs: minimum span length for a segment to qualify, and the
/// fraction of a stored span re-marked for recomputation on reuse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorConfig {
    pub min_segment_len: usize,
    pub rho: f64,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        AnnotatorConfig {
            min_segment_len: 128,
            rho: 0.25,
        }
    }
}

impl AnnotatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_segment_len < 1 {
            return Err(Error::config("min_segment_len must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config(format!("rho {} outside [0, 1]", self.rho)));
        }
        Ok(())
    }
}

/// Where a stored segment came from: request and 1-based inclusive span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentOrigin {
    pub request_id: String,
    pub l: usize,
    pub r: usize,
}

/// A reusable token span with its recompute mask and retrieval hashes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReusableSegment {
    pub tokens: TokenSeq,
    /// Aligned to `tokens`; true = recompute this position in a new context.
    pub recompute_mask: Vec<bool>,
    pub origin: SegmentOrigin,
    /// Rolling hash of the first `min_segment_len` tokens.
    pub prefix_hash: u64,
    /// Rolling hash of the whole span.
    pub full_hash: u64,
    /// SHA-256 of the whole span, for collision-free verification.
    pub digest: Digest256,
    pub score: f64,
    /// Construction-time mask bits set inside the origin span. Always zero;
    /// carried so the pool can re-assert the privacy invariant at insert.
    pub masked_in_origin: usize,
}

impl ReusableSegment {
    /// Assembles a segment, computing its prefix hash (over `window_len`
    /// tokens), full hash, and digest from the given parameters.
    pub fn build(
        tokens: TokenSeq,
        origin: SegmentOrigin,
        recompute_mask: Vec<bool>,
        score: f64,
        params: &HashParams,
        window_len: usize,
    ) -> Result<Self> {
        if tokens.len() < window_len {
            return Err(Error::invalid(format!(
                "segment length {} below window length {window_len}",
                tokens.len()
            )));
        }
        if recompute_mask.len() != tokens.len() {
            return Err(Error::LengthMismatch {
                context: "segment recompute_mask",
                expected: tokens.len(),
                actual: recompute_mask.len(),
            });
        }
        let prefix_hash = params.hash_window(&tokens.as_slice()[..window_len]);
        let full_hash = params.hash_window(tokens.as_slice());
        Ok(ReusableSegment {
            digest: digest_slice(tokens.as_slice()),
            tokens,
            recompute_mask,
            origin,
            prefix_hash,
            full_hash,
            score,
            masked_in_origin: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn recompute_count(&self) -> usize {
        self.recompute_mask.iter().filter(|&&b| b).count()
    }
}

/// Result of annotating one request.
#[derive(Debug, Clone)]
pub struct Annotation {
    pub segments: Vec<ReusableSegment>,
    /// Number of candidate spans scored; the search is O(1) per candidate.
    pub candidates_evaluated: u64,
}

/// Picks the span inside `seg` (length >= `min_segment_len`) maximizing
/// intra minus inter attention. Returns `None` when the coarse segment is
/// too short or no candidate scores strictly positive.
pub fn select_reusable(
    table: &SummedAreaTable,
    seg: CoarseSegment,
    cfg: &AnnotatorConfig,
) -> Result<Option<SegmentSpan>> {
    select_reusable_counted(table, seg, cfg).map(|(span, _)| span)
}

pub(crate) fn select_reusable_counted(
    table: &SummedAreaTable,
    seg: CoarseSegment,
    cfg: &AnnotatorConfig,
) -> Result<(Option<SegmentSpan>, u64)> {
    cfg.validate()?;
    if seg.a < 1 || seg.b > table.dim() || seg.a > seg.b {
        return Err(Error::Bounds {
            context: "select_reusable segment",
            lo: seg.a,
            hi: seg.b,
            n: table.dim(),
        });
    }
    if seg.len() < cfg.min_segment_len {
        return Ok((None, 0));
    }
    let mut best: Option<(i64, SegmentSpan)> = None;
    let mut evaluated = 0u64;
    for l in seg.a..=seg.b {
        let first_r = l + cfg.min_segment_len - 1;
        if first_r > seg.b {
            break;
        }
        for r in first_r..=seg.b {
            let score = table.intra_attn_unchecked(l, r) - table.inter_attn_unchecked(l, r);
            evaluated += 1;
            let q = quantize_score(score);
            let candidate = SegmentSpan { l, r, score };
            best = match best {
                None => Some((q, candidate)),
                Some((bq, cur)) => {
                    if q > bq
                        || (q == bq
                            && (candidate.len() > cur.len()
                                || (candidate.len() == cur.len() && l < cur.l)))
                    {
                        Some((q, candidate))
                    } else {
                        Some((bq, cur))
                    }
                }
            };
        }
    }
    Ok((best.filter(|(q, _)| *q > 0).map(|(_, s)| s), evaluated))
}

/// Marks the ceil(rho * len) tokens of `span` with the largest per-token
/// inter-minus-intra attention for recomputation; ties break toward the
/// smaller index.
pub fn mark_recompute(
    table: &SummedAreaTable,
    span: SegmentSpan,
    cfg: &AnnotatorConfig,
) -> Result<Vec<bool>> {
    cfg.validate()?;
    if span.l < 1 || span.r > table.dim() || span.l > span.r {
        return Err(Error::Bounds {
            context: "mark_recompute span",
            lo: span.l,
            hi: span.r,
            n: table.dim(),
        });
    }
    let len = span.len();
    let count = ((cfg.rho * len as f64).ceil() as usize).min(len);
    let mut mask = vec![false; len];
    if count == 0 {
        return Ok(mask);
    }
    // Per-token inter (columns before the span) and intra (columns l..=i).
    let mut ranked: Vec<(i64, usize)> = Vec::with_capacity(len);
    for i in span.l..=span.r {
        let inter = if span.l == 1 {
            0.0
        } else {
            table.rect_sum_unchecked(i, i, 1, span.l - 1)
        };
        let intra = table.rect_sum_unchecked(i, i, span.l, i);
        ranked.push((quantize_score(inter - intra), i));
    }
    // Descending score; equal scores keep ascending index order.
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in ranked.iter().take(count) {
        mask[i - span.l] = true;
    }
    Ok(mask)
}

/// Full annotation pass: validates the matrix, builds the summed-area table
/// in place, segments the prompt by its mask, selects one reusable span per
/// coarse segment, marks recomputation, and computes retrieval hashes.
pub fn annotate_request(
    req: &Request,
    mask: &SensitivityMask,
    matrix: AttentionMatrix,
    cfg: &AnnotatorConfig,
    params: &HashParams,
) -> Result<Annotation> {
    cfg.validate()?;
    req.validate()?;
    let n = req.tokens.len();
    if mask.len() != n {
        return Err(Error::LengthMismatch {
            context: "annotate_request mask",
            expected: n,
            actual: mask.len(),
        });
    }
    if matrix.dim() != n {
        return Err(Error::LengthMismatch {
            context: "annotate_request attention",
            expected: n,
            actual: matrix.dim(),
        });
    }
    matrix.validate()?;
    let table = build_in_place(matrix);
    let mut segments = Vec::new();
    let mut evaluated = 0u64;
    for seg in coarse_segments(&req.tokens, mask)? {
        let (span, count) = select_reusable_counted(&table, seg, cfg)?;
        evaluated += count;
        let Some(span) = span else { continue };
        let recompute_mask = mark_recompute(&table, span, cfg)?;
        let tokens = TokenSeq::new(req.tokens.slice1(span.l, span.r).to_vec());
        let masked_in_origin = (span.l..=span.r).filter(|&p| mask.at1(p)).count();
        debug_assert_eq!(masked_in_origin, 0);
        segments.push(ReusableSegment::build(
            tokens,
            SegmentOrigin {
                request_id: req.request_id.clone(),
                l: span.l,
                r: span.r,
            },
            recompute_mask,
            span.score,
            params,
            cfg.min_segment_len,
        )?);
    }
    Ok(Annotation {
        segments,
        candidates_evaluated: evaluated,
    })
}
