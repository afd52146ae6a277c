//! The KV pool: stores reusable segments, indexes them by prefix hash,
//! deduplicates containment (only the longest copy survives), and evicts
//! least-recently-used entries under a token budget.
//!
//! Single-writer, multi-reader contract: lookups are read-only and may run
//! concurrently; insert/touch/evict require exclusive access.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::annotator::ReusableSegment;
use crate::error::{Error, Result};
use crate::hashing::{Digest256, HashParams};
use crate::retriever::find_substring_occurrences;

/// Pool knobs. `window_len` must equal the annotator's `min_segment_len` so
/// the retrieval filter and the stored prefix hashes always agree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    /// Total stored-token budget, standing in for cache memory.
    pub capacity_tokens: usize,
    pub window_len: usize,
}

impl PoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len < 1 {
            return Err(Error::config("window_len must be >= 1"));
        }
        if self.capacity_tokens < self.window_len {
            return Err(Error::config(format!(
                "capacity_tokens {} below window_len {}",
                self.capacity_tokens, self.window_len
            )));
        }
        Ok(())
    }
}

/// Stable identifier of a pool entry.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct EntryId(pub u64);

impl std::fmt::Display for EntryId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A stored segment with its LRU bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub id: EntryId,
    pub segment: ReusableSegment,
    pub last_used: u64,
}

/// What happened to an inserted segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InsertOutcome {
    Stored {
        id: EntryId,
    },
    /// The new segment is a contiguous substring of an existing entry; only
    /// the longer copy is kept.
    DroppedAsContained {
        container: EntryId,
    },
    /// Existing entries were contiguous substrings of the new segment and
    /// were replaced by it.
    SupersededExisting {
        id: EntryId,
        superseded: Vec<EntryId>,
    },
    /// Byte-identical segment already stored; its LRU timestamp was refreshed.
    Duplicate {
        id: EntryId,
    },
}

/// Segment store with prefix-hash index, containment dedup, and LRU eviction.
#[derive(Debug, Clone)]
pub struct KvPool {
    cfg: PoolConfig,
    params: HashParams,
    entries: BTreeMap<EntryId, PoolEntry>,
    prefix_index: BTreeMap<u64, BTreeSet<EntryId>>,
    digest_index: BTreeMap<Digest256, EntryId>,
    next_id: u64,
    total_tokens: usize,
}

impl KvPool {
    pub fn new(cfg: PoolConfig, params: HashParams) -> Result<Self> {
        cfg.validate()?;
        Ok(KvPool {
            cfg,
            params,
            entries: BTreeMap::new(),
            prefix_index: BTreeMap::new(),
            digest_index: BTreeMap::new(),
            next_id: 0,
            total_tokens: 0,
        })
    }

    pub fn config(&self) -> PoolConfig {
        self.cfg
    }

    pub fn params(&self) -> HashParams {
        self.params
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.total_tokens
    }

    pub fn entry(&self, id: EntryId) -> Option<&PoolEntry> {
        self.entries.get(&id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &PoolEntry> {
        self.entries.values()
    }

    /// Entry ids whose stored prefix hash equals `hash`. O(1) expected.
    pub fn lookup_prefix(&self, hash: u64) -> Option<&BTreeSet<EntryId>> {
        self.prefix_index.get(&hash)
    }

    /// Refreshes an entry's LRU timestamp.
    pub fn touch(&mut self, id: EntryId, now: u64) -> Result<()> {
        match self.entries.get_mut(&id) {
            Some(e) => {
                e.last_used = now;
                Ok(())
            }
            None => Err(Error::UnknownEntry(id.0)),
        }
    }

    /// Inserts a segment, applying duplicate detection, containment dedup in
    /// both directions, and LRU eviction down to the token budget.
    pub fn insert(&mut self, segment: ReusableSegment, now: u64) -> Result<InsertOutcome> {
        let w = self.cfg.window_len;
        if segment.len() < w {
            return Err(Error::invalid(format!(
                "segment length {} below pool window length {w}",
                segment.len()
            )));
        }
        if segment.masked_in_origin != 0 {
            return Err(Error::invalid(
                "segment carries construction-time sensitive positions",
            ));
        }
        // Guard the window_len = min_segment_len contract: the stored prefix
        // hash must cover exactly this pool's window.
        let expected_prefix = self.params.hash_window(&segment.tokens.as_slice()[..w]);
        if segment.prefix_hash != expected_prefix {
            return Err(Error::config(
                "segment prefix hash does not cover the pool window (annotator/pool window mismatch?)",
            ));
        }

        // Exact duplicate: refresh recency, store nothing.
        if let Some(&id) = self.digest_index.get(&segment.digest) {
            self.touch(id, now)?;
            return Ok(InsertOutcome::Duplicate { id });
        }

        // New segment contained in an existing entry: two-phase match of the
        // new tokens against each stored entry's token sequence.
        for entry in self.entries.values() {
            if entry.segment.len() < segment.len() {
                continue;
            }
            if !find_substring_occurrences(
                entry.segment.tokens.as_slice(),
                segment.tokens.as_slice(),
                &self.params,
                w,
            )
            .is_empty()
            {
                return Ok(InsertOutcome::DroppedAsContained {
                    container: entry.id,
                });
            }
        }

        // Existing entries contained in the new segment: scan the new tokens
        // with the prefix index, then verify token-exactly.
        let mut superseded = Vec::new();
        for entry in self.entries.values() {
            if entry.segment.len() > segment.len() {
                continue;
            }
            if !find_substring_occurrences(
                segment.tokens.as_slice(),
                entry.segment.tokens.as_slice(),
                &self.params,
                w,
            )
            .is_empty()
            {
                superseded.push(entry.id);
            }
        }
        for &id in &superseded {
            self.remove(id);
        }

        let id = EntryId(self.next_id);
        self.next_id += 1;
        self.total_tokens += segment.len();
        self.prefix_index
            .entry(segment.prefix_hash)
            .or_default()
            .insert(id);
        self.digest_index.insert(segment.digest, id);
        self.entries.insert(
            id,
            PoolEntry {
                id,
                segment,
                last_used: now,
            },
        );
        self.evict_to_budget();

        Ok(if superseded.is_empty() {
            InsertOutcome::Stored { id }
        } else {
            InsertOutcome::SupersededExisting { id, superseded }
        })
    }

    fn remove(&mut self, id: EntryId) -> Option<PoolEntry> {
        let entry = self.entries.remove(&id)?;
        self.total_tokens -= entry.segment.len();
        if let Some(set) = self.prefix_index.get_mut(&entry.segment.prefix_hash) {
            set.remove(&id);
            if set.is_empty() {
                self.prefix_index.remove(&entry.segment.prefix_hash);
            }
        }
        self.digest_index.remove(&entry.segment.digest);
        Some(entry)
    }

    fn evict_to_budget(&mut self) {
        while self.total_tokens > self.cfg.capacity_tokens {
            let victim = self
                .entries
                .values()
                .min_by_key(|e| (e.last_used, e.id))
                .map(|e| e.id);
            match victim {
                Some(id) => {
                    self.remove(id);
                }
                None => break,
            }
        }
    }

    /// One JSON object per line: id, origin, token ids, recompute mask,
    /// hex digest, decimal prefix/full hashes, last_used.
    pub fn export_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for entry in self.entries.values() {
            let line = PoolSnapshotLine {
                id: entry.id.0,
                origin: (
                    entry.segment.origin.request_id.clone(),
                    entry.segment.origin.l,
                    entry.segment.origin.r,
                ),
                tokens: entry.segment.tokens.0.iter().map(|t| t.0).collect(),
                recompute_mask: entry
                    .segment
                    .recompute_mask
                    .iter()
                    .map(|&b| u8::from(b))
                    .collect(),
                digest: entry.segment.digest.to_hex(),
                prefix_hash: entry.segment.prefix_hash,
                full_hash: entry.segment.full_hash,
                last_used: entry.last_used,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Debug check of the structural invariants: index consistency, budget,
    /// containment-freedom. Intended for tests; O(pool size^2).
    pub fn check_invariants(&self) -> Result<()> {
        let live: BTreeSet<EntryId> = self.entries.keys().copied().collect();
        let indexed: BTreeSet<EntryId> = self
            .prefix_index
            .values()
            .flat_map(|s| s.iter().copied())
            .collect();
        if live != indexed {
            return Err(Error::invalid("prefix index out of sync with entries"));
        }
        for (hash, ids) in &self.prefix_index {
            for id in ids {
                let e = &self.entries[id];
                if e.segment.prefix_hash != *hash {
                    return Err(Error::invalid("entry indexed under wrong prefix hash"));
                }
            }
        }
        let total: usize = self.entries.values().map(|e| e.segment.len()).sum();
        if total != self.total_tokens {
            return Err(Error::invalid("token accounting drifted"));
        }
        if total > self.cfg.capacity_tokens {
            return Err(Error::invalid("pool over budget"));
        }
        for a in self.entries.values() {
            if a.segment.masked_in_origin != 0 {
                return Err(Error::invalid("stored segment violates privacy containment"));
            }
            for b in self.entries.values() {
                if a.id == b.id || a.segment.len() > b.segment.len() {
                    continue;
                }
                if !find_substring_occurrences(
                    b.segment.tokens.as_slice(),
                    a.segment.tokens.as_slice(),
                    &self.params,
                    self.cfg.window_len,
                )
                .is_empty()
                {
                    return Err(Error::invalid(format!(
                        "entry {} is contained in entry {}",
                        a.id, b.id
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct PoolSnapshotLine {
    id: u64,
    origin: (String, usize, usize),
    tokens: Vec<u32>,
    recompute_mask: Vec<u8>,
    digest: String,
    prefix_hash: u64,
    full_hash: u64,
    last_used: u64,
}
