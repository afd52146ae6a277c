//! The KV retriever: two-phase rolling-hash matching of stored segments
//! against an incoming request, session-aware sharing policies, and
//! assembly of a match plan whose unmatched positions stay zero placeholders
//! for the engine to fill.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{
    digest, digest_slice, prefix_hash_array, roll_window, substring_hash, Digest256, HashParams,
    PrefixHashes,
};
use crate::pool::{EntryId, KvPool};
use crate::types::{Request, SensitivityMask, TokenSeq};

/// Which sharing rule governs a retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingPolicy {
    /// No reuse at all; every position is computed fresh.
    NoSharing,
    /// Unrestricted reuse of the same user's previous request, as an exact
    /// token prefix.
    SameUserFull,
    /// Cross-user reuse of stored non-sensitive segments at token granularity.
    CrossUserSelective,
    /// Fixed-size chunk reuse: a chunk matches only if its exact content was
    /// stored at the same alignment and it contains no sensitive token.
    FixedChunk { chunk_len: usize },
    /// Prefix-only reuse: coverage ends at the first diverging or sensitive
    /// position.
    PrefixOnly,
}

impl std::fmt::Display for SharingPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SharingPolicy::NoSharing => write!(f, "no_sharing"),
            SharingPolicy::SameUserFull => write!(f, "same_user_full"),
            SharingPolicy::CrossUserSelective => write!(f, "cross_user_selective"),
            SharingPolicy::FixedChunk { chunk_len } => write!(f, "fixed_chunk_{chunk_len}"),
            SharingPolicy::PrefixOnly => write!(f, "prefix_only"),
        }
    }
}

/// Where a covered span's cache content comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentSource {
    PoolEntry(EntryId),
    SessionPrefix,
    SharedPrefix,
    Chunk { index: usize },
}

/// One reused span: `offset` is the 1-based request position of its start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub source: AssignmentSource,
    pub offset: usize,
    pub len: usize,
}

impl Assignment {
    pub fn end(&self) -> usize {
        self.offset + self.len - 1
    }
}

/// Scan and coverage statistics for one retrieval.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanStats {
    pub match_rate: f64,
    pub recompute_rate: f64,
    /// Rolling-hash windows scanned (linear in request length).
    pub windows_scanned: u64,
    /// Prefix-filter hits handed to verification.
    pub candidates: u64,
}

/// Per-request reuse plan: disjoint assignments, the subset of covered
/// positions to recompute, and everything else left uncovered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPlan {
    pub request_id: String,
    pub assignments: Vec<Assignment>,
    pub recompute_positions: BTreeSet<usize>,
    pub uncovered_positions: BTreeSet<usize>,
    pub stats: PlanStats,
}

impl MatchPlan {
    fn empty(request_id: String, n: usize) -> Self {
        MatchPlan {
            request_id,
            assignments: Vec::new(),
            recompute_positions: BTreeSet::new(),
            uncovered_positions: (1..=n).collect(),
            stats: PlanStats::default(),
        }
    }

    pub fn covered_tokens(&self) -> usize {
        self.assignments.iter().map(|a| a.len).sum()
    }

    pub fn match_rate(&self) -> f64 {
        self.stats.match_rate
    }
}

/// Two-phase substring search shared by retrieval and pool dedup: slide a
/// `window_len` window over `haystack` comparing against the needle's prefix
/// window hash, then verify candidates with a full-length hash pre-check and
/// a digest comparison. Returns all 1-based occurrence offsets.
pub fn find_substring_occurrences(
    haystack: &[crate::types::TokenId],
    needle: &[crate::types::TokenId],
    params: &HashParams,
    window_len: usize,
) -> Vec<usize> {
    let (hn, nn) = (haystack.len(), needle.len());
    if nn < window_len || hn < nn || nn == 0 {
        return Vec::new();
    }
    let needle_window = params.hash_window(&needle[..window_len]);
    let needle_full = params.hash_window(needle);
    let needle_digest = digest_slice(needle);
    let hay_seq = TokenSeq::new(haystack.to_vec());
    let ph = prefix_hash_array(&hay_seq, params);
    let mut out = Vec::new();
    for offset in 1..=hn - window_len + 1 {
        if substring_hash(&ph, offset, offset + window_len - 1).unwrap() != needle_window {
            continue;
        }
        if offset + nn - 1 > hn {
            continue;
        }
        if substring_hash(&ph, offset, offset + nn - 1).unwrap() != needle_full {
            continue;
        }
        if digest_slice(&haystack[offset - 1..offset + nn - 1]) == needle_digest {
            out.push(offset);
        }
    }
    out
}

/// State the retriever keeps across requests: per-user last request for
/// same-session reuse, prior requests for the prefix baseline, and the
/// chunk-hash view for the fixed-chunk baseline.
#[derive(Debug, Clone)]
pub struct Retriever {
    params: HashParams,
    window_len: usize,
    session: BTreeMap<String, TokenSeq>,
    prior: Vec<(TokenSeq, SensitivityMask)>,
    chunk_index: BTreeMap<usize, BTreeSet<Digest256>>,
}

impl Retriever {
    pub fn new(params: HashParams, window_len: usize) -> Self {
        Retriever {
            params,
            window_len,
            session: BTreeMap::new(),
            prior: Vec::new(),
            chunk_index: BTreeMap::new(),
        }
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn params(&self) -> HashParams {
        self.params
    }

    /// Records a served request so later requests can reuse it under the
    /// session, prefix, and fixed-chunk policies. For `FixedChunk`, aligned
    /// full chunks containing no sensitive token are indexed by content hash.
    pub fn observe_request(
        &mut self,
        req: &Request,
        mask: &SensitivityMask,
        policy: SharingPolicy,
    ) {
        self.session
            .insert(req.user_id.clone(), req.tokens.clone());
        self.prior.push((req.tokens.clone(), mask.clone()));
        if let SharingPolicy::FixedChunk { chunk_len } = policy {
            let n = req.tokens.len();
            let store = self.chunk_index.entry(chunk_len).or_default();
            let mut start = 1;
            while start + chunk_len - 1 <= n {
                let end = start + chunk_len - 1;
                if (start..=end).all(|p| !mask.at1(p)) {
                    store.insert(digest(&req.tokens, start, end).unwrap());
                }
                start += chunk_len;
            }
        }
    }

    /// Slides a `window_len` window across the request with O(1) rolling
    /// updates, emitting `(offset, entry)` for every window whose hash is in
    /// the pool's prefix index. Returns the candidates and the number of
    /// windows scanned.
    pub fn find_candidates(
        &self,
        request: &TokenSeq,
        pool: &KvPool,
    ) -> (Vec<(usize, EntryId)>, u64) {
        let n = request.len();
        let w = self.window_len;
        if n < w {
            return (Vec::new(), 0);
        }
        let mut candidates = Vec::new();
        let pow_w1 = self.params.pow_base(w as u64 - 1);
        let mut h = self.params.hash_window(request.slice1(1, w));
        let mut windows = 0u64;
        for offset in 1..=n - w + 1 {
            windows += 1;
            if let Some(ids) = pool.lookup_prefix(h) {
                for &id in ids {
                    candidates.push((offset, id));
                }
            }
            if offset + w <= n {
                h = roll_window(
                    h,
                    request.at1(offset),
                    request.at1(offset + w),
                    pow_w1,
                    &self.params,
                );
            }
        }
        (candidates, windows)
    }

    /// Verifies one candidate: an O(1) full-length hash pre-check against the
    /// stored full hash, then a digest comparison that rules out collisions.
    /// Out-of-range candidates verify false rather than erroring.
    pub fn verify(
        &self,
        candidate: (usize, EntryId),
        request: &TokenSeq,
        request_ph: &PrefixHashes,
        pool: &KvPool,
    ) -> bool {
        let (offset, id) = candidate;
        let Some(entry) = pool.entry(id) else {
            return false;
        };
        let m = entry.segment.len();
        let n = request.len();
        if offset < 1 || offset + m - 1 > n {
            return false;
        }
        match substring_hash(request_ph, offset, offset + m - 1) {
            Ok(h) if h == entry.segment.full_hash => {}
            _ => return false,
        }
        digest(request, offset, offset + m - 1)
            .map(|d| d == entry.segment.digest)
            .unwrap_or(false)
    }

    /// All verified `(offset, entry)` pairs for a request, before overlap
    /// resolution. Exposed for equivalence testing against naive search.
    pub fn verified_candidates(
        &self,
        request: &TokenSeq,
        pool: &KvPool,
    ) -> (Vec<(usize, EntryId)>, PlanStats) {
        let (candidates, windows) = self.find_candidates(request, pool);
        let ph = prefix_hash_array(request, &self.params);
        let verified: Vec<(usize, EntryId)> = candidates
            .iter()
            .copied()
            .filter(|&c| self.verify(c, request, &ph, pool))
            .collect();
        (
            verified,
            PlanStats {
                windows_scanned: windows,
                candidates: candidates.len() as u64,
                ..Default::default()
            },
        )
    }

    /// Builds the reuse plan for a request under the given policy.
    pub fn match_request(
        &self,
        req: &Request,
        mask: &SensitivityMask,
        pool: &KvPool,
        policy: SharingPolicy,
    ) -> Result<MatchPlan> {
        req.validate()?;
        let n = req.tokens.len();
        if mask.len() != n {
            return Err(Error::LengthMismatch {
                context: "match_request mask",
                expected: n,
                actual: mask.len(),
            });
        }
        let mut plan = MatchPlan::empty(req.request_id.clone(), n);
        match policy {
            SharingPolicy::NoSharing => {}
            SharingPolicy::SameUserFull => {
                if let Some(prev) = self.session.get(&req.user_id) {
                    let mut l = 0;
                    while l < n && l < prev.len() && req.tokens.at1(l + 1) == prev.at1(l + 1) {
                        l += 1;
                    }
                    if l > 0 {
                        plan.assignments.push(Assignment {
                            source: AssignmentSource::SessionPrefix,
                            offset: 1,
                            len: l,
                        });
                    }
                }
            }
            SharingPolicy::CrossUserSelective => {
                let (verified, stats) = self.verified_candidates(&req.tokens, pool);
                plan.stats = stats;
                // Greedy left-to-right; at equal offsets prefer the longer
                // segment, then the smaller id; skip anything overlapping.
                let mut ordered: Vec<(usize, usize, EntryId)> = verified
                    .into_iter()
                    .map(|(off, id)| (off, pool.entry(id).unwrap().segment.len(), id))
                    .collect();
                ordered.sort_by(|a, b| {
                    a.0.cmp(&b.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2))
                });
                let mut next_free = 1usize;
                for (off, len, id) in ordered {
                    if off < next_free {
                        continue;
                    }
                    plan.assignments.push(Assignment {
                        source: AssignmentSource::PoolEntry(id),
                        offset: off,
                        len,
                    });
                    let seg = &pool.entry(id).unwrap().segment;
                    for (k, &rc) in seg.recompute_mask.iter().enumerate() {
                        if rc {
                            plan.recompute_positions.insert(off + k);
                        }
                    }
                    next_free = off + len;
                }
            }
            SharingPolicy::FixedChunk { chunk_len } => {
                if chunk_len == 0 {
                    return Err(Error::config("chunk_len must be >= 1"));
                }
                if let Some(store) = self.chunk_index.get(&chunk_len) {
                    let mut start = 1;
                    let mut index = 0;
                    while start + chunk_len - 1 <= n {
                        let end = start + chunk_len - 1;
                        let clean = (start..=end).all(|p| !mask.at1(p));
                        if clean && store.contains(&digest(&req.tokens, start, end)?) {
                            plan.assignments.push(Assignment {
                                source: AssignmentSource::Chunk { index },
                                offset: start,
                                len: chunk_len,
                            });
                        }
                        start += chunk_len;
                        index += 1;
                    }
                }
            }
            SharingPolicy::PrefixOnly => {
                let mut best = 0usize;
                for (prev, prev_mask) in &self.prior {
                    let mut l = 0;
                    while l < n && l < prev.len() {
                        let p = l + 1;
                        if req.tokens.at1(p) != prev.at1(p) || mask.at1(p) || prev_mask.at1(p) {
                            break;
                        }
                        l += 1;
                    }
                    best = best.max(l);
                }
                if best > 0 {
                    plan.assignments.push(Assignment {
                        source: AssignmentSource::SharedPrefix,
                        offset: 1,
                        len: best,
                    });
                }
            }
        }

        for a in &plan.assignments {
            for p in a.offset..=a.end() {
                plan.uncovered_positions.remove(&p);
            }
        }
        let covered = plan.covered_tokens();
        plan.stats.match_rate = if n == 0 { 0.0 } else { covered as f64 / n as f64 };
        plan.stats.recompute_rate = if covered == 0 {
            0.0
        } else {
            plan.recompute_positions.len() as f64 / covered as f64
        };
        Ok(plan)
    }

    /// The binary reuse signal exposed to the probing harness: 1 iff the
    /// probe's plan covers anything.
    pub fn reuse_oracle(&self, probe: &Request, pool: &KvPool, policy: SharingPolicy) -> u8 {
        let mask = probe
            .mask_override
            .clone()
            .unwrap_or_else(|| SensitivityMask::all_clear(probe.tokens.len()));
        match self.match_request(probe, &mask, pool, policy) {
            Ok(plan) => u8::from(plan.stats.match_rate > 0.0),
            Err(_) => 0,
        }
    }
}
