//! Probing attack harness against the binary reuse oracle.
//!
//! The adversary sees only whether a probe triggered any reuse. Its search
//! runs in three phases:
//!
//! 1. raw enumeration of every window-length token sequence over the hint
//!    alphabet (desk scale only, guarded);
//! 2. minimal-window refinement over hint strings: for each candidate string
//!    from background knowledge, two-pointer shrinking isolates every
//!    minimal substring that still triggers reuse. Because the oracle fires
//!    exactly when a probe contains a whole stored segment, each minimal
//!    firing window is exactly one stored segment;
//! 3. token-by-token extension of recovered spans while the oracle stays 1.
//!    Extension only carries information when exactly one continuation
//!    fires; a superset of a recovered span always fires, so every
//!    continuation fires and the adversary must stop — this phase documents
//!    that the side channel does not extend across segment boundaries.
//!
//! Recovery is scored against ground truth by origin: a sensitive token
//! counts as directly recovered when its position lies inside the origin
//! span of a recovered (content-identified) stored segment.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::digest_slice;
use crate::pool::KvPool;
use crate::types::{Region, Request, SensitivityMask, TokenId, TokenSeq};

/// Attack search bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackParams {
    /// Probe window length; matches the pool's retrieval window.
    pub window_len: usize,
    /// Maximum number of oracle probes.
    pub budget: u64,
    /// Run the raw alphabet^window enumeration phase.
    pub enumerate_alphabet: bool,
    /// Refuse raw enumeration above this alphabet size.
    pub max_alphabet: usize,
    /// Attempt extension of recovered spans (phase 3).
    pub try_extension: bool,
}

impl Default for AttackParams {
    fn default() -> Self {
        AttackParams {
            window_len: 128,
            budget: 10_000_000,
            enumerate_alphabet: false,
            max_alphabet: 64,
            try_extension: true,
        }
    }
}

/// What the probing loop recovered, before scoring.
#[derive(Debug, Clone, Default)]
pub struct AttackFindings {
    /// Content the adversary confirmed as stored segments.
    pub recovered_spans: Vec<Vec<TokenId>>,
    pub probes_issued: u64,
    /// Budget ran out before the search finished.
    pub partial: bool,
}

/// Scored privacy outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub probes_issued: u64,
    pub sensitive_tokens_total: usize,
    pub sensitive_recovered_exact: usize,
    pub nonsensitive_recovered: usize,
    pub direct_recovery_rate: f64,
    pub partial: bool,
}

struct Budget {
    remaining: u64,
    issued: u64,
    exhausted: bool,
}

impl Budget {
    fn new(limit: u64) -> Self {
        Budget {
            remaining: limit,
            issued: 0,
            exhausted: false,
        }
    }

    fn probe(&mut self, oracle: &mut dyn FnMut(&[TokenId]) -> u8, tokens: &[TokenId]) -> Option<u8> {
        if self.remaining == 0 {
            self.exhausted = true;
            return None;
        }
        self.remaining -= 1;
        self.issued += 1;
        Some(oracle(tokens))
    }
}

/// Breadth-first token search against the reuse oracle. `hints` model the
/// adversary's background knowledge: candidate strings the victim's prompt
/// may contain (the strong adversary gets the full prompt universe, which
/// upper-bounds any real attacker). The alphabet is derived from the hints.
pub fn attack_probe_loop(
    oracle: &mut dyn FnMut(&[TokenId]) -> u8,
    hints: &[TokenSeq],
    params: &AttackParams,
) -> Result<AttackFindings> {
    if params.window_len == 0 {
        return Err(Error::config("attack window_len must be >= 1"));
    }
    let w = params.window_len;
    let alphabet: BTreeSet<TokenId> = hints
        .iter()
        .flat_map(|h| h.as_slice().iter().copied())
        .collect();
    let mut budget = Budget::new(params.budget);
    let mut recovered: BTreeSet<Vec<TokenId>> = BTreeSet::new();

    // Phase 1: raw enumeration over the hint alphabet, desk scale only.
    if params.enumerate_alphabet {
        let a = alphabet.len();
        if a > params.max_alphabet {
            return Err(Error::ScaleGuard(format!(
                "alphabet size {a} exceeds configured max {}",
                params.max_alphabet
            )));
        }
        let total = (a as f64).powi(w as i32);
        if total > params.budget as f64 {
            return Err(Error::ScaleGuard(format!(
                "enumeration of {a}^{w} = {total:.0} windows exceeds probe budget {}",
                params.budget
            )));
        }
        let letters: Vec<TokenId> = alphabet.iter().copied().collect();
        if !letters.is_empty() {
            let mut odometer = vec![0usize; w];
            let mut window: Vec<TokenId> = odometer.iter().map(|&k| letters[k]).collect();
            'enumeration: loop {
                match budget.probe(oracle, &window) {
                    Some(1) => {
                        recovered.insert(window.clone());
                    }
                    Some(_) => {}
                    None => break 'enumeration,
                }
                // Advance the odometer.
                let mut pos = w;
                loop {
                    if pos == 0 {
                        break 'enumeration;
                    }
                    pos -= 1;
                    odometer[pos] += 1;
                    if odometer[pos] < letters.len() {
                        window[pos] = letters[odometer[pos]];
                        break;
                    }
                    odometer[pos] = 0;
                    window[pos] = letters[0];
                }
            }
        }
    }

    // Phase 2: minimal-window refinement over each hint string.
    'hints: for hint in hints {
        let n = hint.len();
        if n < w {
            continue;
        }
        let tokens = hint.as_slice();
        let mut l = 1usize;
        let mut r = w; // probe spans are at least one window long
        loop {
            // Advance r until the span fires.
            let fired = loop {
                if r > n {
                    break false;
                }
                match budget.probe(oracle, &tokens[l - 1..r]) {
                    Some(1) => break true,
                    Some(_) => r += 1,
                    None => break 'hints,
                }
            };
            if !fired {
                break;
            }
            // Shrink from the left while the span still fires.
            loop {
                if l + w > r {
                    break; // below one window, cannot fire
                }
                match budget.probe(oracle, &tokens[l..r]) {
                    Some(1) => l += 1,
                    Some(_) => break,
                    None => break 'hints,
                }
            }
            // [l, r] is minimal in both directions: exactly one stored segment.
            recovered.insert(tokens[l - 1..r].to_vec());
            l += 1;
            r = r.max(l + w - 1);
        }
    }

    // Phase 3: extension attempts. With containment semantics every
    // continuation of a recovered span fires, so the first ambiguous round
    // stops each direction. Extension length is capped at the longest hint:
    // no victim prompt is longer than the background-knowledge universe.
    if params.try_extension {
        let max_len = hints.iter().map(|h| h.len()).max().unwrap_or(0) + w;
        let spans: Vec<Vec<TokenId>> = recovered.iter().cloned().collect();
        'extension: for span in spans {
            for right in [true, false] {
                let mut current = span.clone();
                while current.len() < max_len {
                    let mut firing: Vec<TokenId> = Vec::new();
                    for &t in &alphabet {
                        let mut probe = current.clone();
                        if right {
                            probe.push(t);
                        } else {
                            probe.insert(0, t);
                        }
                        match budget.probe(oracle, &probe) {
                            Some(1) => firing.push(t),
                            Some(_) => {}
                            None => break 'extension,
                        }
                        if firing.len() > 1 {
                            break; // already ambiguous
                        }
                    }
                    if firing.len() != 1 {
                        break; // no information in this direction
                    }
                    let t = firing[0];
                    if right {
                        current.push(t);
                    } else {
                        current.insert(0, t);
                    }
                    recovered.insert(current.clone());
                }
            }
        }
    }

    Ok(AttackFindings {
        recovered_spans: recovered.into_iter().collect(),
        probes_issued: budget.issued,
        partial: budget.exhausted,
    })
}

/// Maps recovered span content back to stored segments and scores direct
/// recovery against the victims' ground-truth masks by origin position.
pub fn score_recovery(
    findings: &AttackFindings,
    pool: &KvPool,
    victims: &[(Request, SensitivityMask)],
) -> RecoveryReport {
    let truth: BTreeMap<&str, (&Request, &SensitivityMask)> = victims
        .iter()
        .map(|(r, m)| (r.request_id.as_str(), (r, m)))
        .collect();
    let recovered_digests: BTreeSet<_> = findings
        .recovered_spans
        .iter()
        .map(|s| digest_slice(s))
        .collect();

    // Positions (request, index) exposed by recovered segments.
    let mut sensitive_positions: BTreeSet<(String, usize)> = BTreeSet::new();
    let mut clear_positions: BTreeSet<(String, usize)> = BTreeSet::new();
    for entry in pool.entries() {
        if !recovered_digests.contains(&entry.segment.digest) {
            continue;
        }
        let origin = &entry.segment.origin;
        let Some((req, mask)) = truth.get(origin.request_id.as_str()) else {
            continue;
        };
        for p in origin.l..=origin.r.min(req.tokens.len()) {
            if mask.at1(p) {
                sensitive_positions.insert((origin.request_id.clone(), p));
            } else {
                clear_positions.insert((origin.request_id.clone(), p));
            }
        }
    }

    let sensitive_tokens_total: usize = victims.iter().map(|(_, m)| m.count_ones()).sum();
    let sensitive_recovered_exact = sensitive_positions.len();
    RecoveryReport {
        probes_issued: findings.probes_issued,
        sensitive_tokens_total,
        sensitive_recovered_exact,
        nonsensitive_recovered: clear_positions.len(),
        direct_recovery_rate: if sensitive_tokens_total == 0 {
            0.0
        } else {
            sensitive_recovered_exact as f64 / sensitive_tokens_total as f64
        },
        partial: findings.partial,
    }
}

/// Wraps a retriever + pool as the binary oracle an adversary drives.
pub fn oracle_for<'a>(
    retriever: &'a crate::retriever::Retriever,
    pool: &'a KvPool,
    policy: crate::retriever::SharingPolicy,
) -> impl FnMut(&[TokenId]) -> u8 + 'a {
    move |tokens: &[TokenId]| {
        let probe = Request {
            request_id: "probe".into(),
            user_id: "adversary".into(),
            tokens: TokenSeq::new(tokens.to_vec()),
            region_labels: vec![Region::User; tokens.len()],
            mask_override: None,
        };
        retriever.reuse_oracle(&probe, pool, policy)
    }
}
