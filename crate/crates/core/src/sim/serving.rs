//! Serving-loop simulation: detection, annotation, pool insertion, and
//! retrieval per request, scored with an affine TTFT cost model.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::annotator::{annotate_request, AnnotatorConfig};
use crate::detector::{apply_policy, perturb_mask, DetectionPolicy, PerturbParams};
use crate::error::{Error, Result};
use crate::pool::{KvPool, PoolConfig};
use crate::retriever::{MatchPlan, Retriever, SharingPolicy};
use crate::sim::attention::{gen_attention, AttentionGenParams};
use crate::sim::workload::WorkloadPair;
use crate::types::{Request, SensitivityMask};

/// Affine TTFT proxy. Reused tokens cost `c_reuse` per token, freshly
/// computed and recomputed tokens cost `c_compute`, plus a fixed base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub c_base_ms: f64,
    pub c_compute_ms: f64,
    pub c_reuse_ms: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            c_base_ms: 20.0,
            c_compute_ms: 0.08,
            c_reuse_ms: 0.004,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if self.c_base_ms < 0.0 || self.c_compute_ms < 0.0 || self.c_reuse_ms < 0.0 {
            return Err(Error::config("cost model constants must be nonnegative"));
        }
        if self.c_reuse_ms >= self.c_compute_ms {
            return Err(Error::config("c_reuse must be below c_compute"));
        }
        Ok(())
    }

    /// `c_base + c_compute * (uncovered + recompute) + c_reuse * (covered - recompute)`.
    pub fn ttft_ms(&self, n: usize, covered: usize, recompute: usize) -> f64 {
        let fresh = (n - covered) + recompute;
        let reused = covered - recompute;
        self.c_base_ms + self.c_compute_ms * fresh as f64 + self.c_reuse_ms * reused as f64
    }
}

/// Where the per-request sensitivity mask comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionMode {
    /// Use the request's ground-truth `mask_override` (error if absent).
    GroundTruth,
    /// Run the configured detection policy on the request.
    Policy,
}

/// Detection configuration for a run: source mask plus optional error
/// injection on top.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub mode: DetectionMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<DetectionPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturb: Option<PerturbParams>,
}

impl DetectionConfig {
    pub fn ground_truth() -> Self {
        DetectionConfig {
            mode: DetectionMode::GroundTruth,
            policy: None,
            perturb: None,
        }
    }

    /// Resolves the mask for one request.
    pub fn mask_for(&self, req: &Request) -> Result<SensitivityMask> {
        let base = match self.mode {
            DetectionMode::GroundTruth => req.mask_override.clone().ok_or_else(|| {
                Error::config(format!(
                    "request {} has no ground-truth mask",
                    req.request_id
                ))
            })?,
            DetectionMode::Policy => {
                let policy = self
                    .policy
                    .as_ref()
                    .ok_or_else(|| Error::config("detection mode 'policy' needs a policy"))?;
                let mut stripped = req.clone();
                stripped.mask_override = None;
                apply_policy(&stripped, policy)?
            }
        };
        match &self.perturb {
            Some(p) => perturb_mask(&base, p),
            None => Ok(base),
        }
    }
}

/// Everything a serving run needs besides the workload and policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServingConfig {
    pub annotator: AnnotatorConfig,
    pub pool: PoolConfig,
    pub hash_seed: u64,
    pub attention: AttentionGenParams,
    pub cost: CostModel,
    pub detection: DetectionConfig,
    /// Optional cap on the fraction of request tokens reused, for the
    /// match-rate sweeps. Assignments are kept greedily until the cap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub match_cap: Option<f64>,
    /// When true, report wall-clock retrieval time per request; reported as
    /// zero otherwise so output stays byte-deterministic.
    #[serde(default)]
    pub measure_retrieval: bool,
}

impl ServingConfig {
    pub fn validate(&self) -> Result<()> {
        self.annotator.validate()?;
        self.pool.validate()?;
        self.cost.validate()?;
        if self.pool.window_len != self.annotator.min_segment_len {
            return Err(Error::config(format!(
                "pool window_len {} must equal annotator min_segment_len {}",
                self.pool.window_len, self.annotator.min_segment_len
            )));
        }
        if let Some(cap) = self.match_cap {
            if !(0.0..=1.0).contains(&cap) {
                return Err(Error::config("match_cap outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Metrics for one served request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub policy: String,
    pub request_id: String,
    pub role: String,
    pub match_rate: f64,
    pub recompute_rate: f64,
    pub ttft_sim_ms: f64,
    pub retrieval_ms: f64,
    pub segments_used: usize,
    pub windows_scanned: u64,
    pub candidates: u64,
    /// Lengths of the segments involved (matched for readers, derived for
    /// writers); values sum to the segment count.
    pub segment_length_histogram: BTreeMap<usize, usize>,
}

/// Run-level aggregates. Rates are computed over reader requests, which are
/// the measured half of each pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub policy: String,
    pub requests: usize,
    pub readers: usize,
    /// Fraction of readers with any match.
    pub hit_rate: f64,
    pub mean_match_rate: f64,
    pub mean_recompute_rate: f64,
    pub mean_ttft_ms: f64,
    pub p50_ttft_ms: f64,
    pub p95_ttft_ms: f64,
    pub mean_retrieval_ms: f64,
    pub mean_candidates: f64,
    pub stored_tokens: usize,
    pub stored_segments: usize,
    pub mean_stored_segment_len: f64,
}

/// Per-request rows plus the run aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_request: Vec<RequestMetrics>,
    pub aggregate: AggregateMetrics,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

/// Applies the match-rate cap: keeps assignments in plan order while the
/// covered-token total stays within `cap * n`, dropping the rest along with
/// their recompute positions.
fn apply_match_cap(plan: &mut MatchPlan, n: usize, cap: f64) {
    let budget = (cap * n as f64).floor() as usize;
    let mut kept = Vec::new();
    let mut covered = 0usize;
    for a in plan.assignments.drain(..) {
        if covered + a.len <= budget {
            covered += a.len;
            kept.push(a);
        }
    }
    plan.assignments = kept;
    plan.recompute_positions.retain(|&p| {
        plan.assignments
            .iter()
            .any(|a| a.offset <= p && p <= a.end())
    });
    plan.uncovered_positions = (1..=n).collect();
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
}

/// The serving state for one policy run; exposed so the attack harness can
/// reuse the populated pool and retriever.
pub struct ServingRun {
    pub pool: KvPool,
    pub retriever: Retriever,
    pub metrics: Metrics,
    /// Annotated requests with their ground-truth masks, for attack scoring.
    pub victims: Vec<(Request, SensitivityMask)>,
}

/// Runs the full loop for one policy: for each pair, serve the writer
/// (retrieve, then detect + annotate + insert), then the reader the same
/// way. Retrieval happens before a request's own segments are inserted.
pub fn run_serving(
    workload: &[WorkloadPair],
    policy: SharingPolicy,
    cfg: &ServingConfig,
) -> Result<Metrics> {
    run_serving_full(workload, policy, cfg).map(|run| run.metrics)
}

pub fn run_serving_full(
    workload: &[WorkloadPair],
    policy: SharingPolicy,
    cfg: &ServingConfig,
) -> Result<ServingRun> {
    cfg.validate()?;
    let params = crate::hashing::HashParams::from_seed(cfg.hash_seed);
    let mut pool = KvPool::new(cfg.pool, params)?;
    let mut retriever = Retriever::new(params, cfg.pool.window_len);
    let mut per_request = Vec::new();
    let mut victims = Vec::new();
    let mut clock = 0u64;
    let mut ordinal = 0u64;

    for pair in workload {
        for (role, req, truth) in [
            ("writer", &pair.writer, &pair.writer_truth),
            ("reader", &pair.reader, &pair.reader_truth),
        ] {
            clock += 1;
            let mask = cfg.detection.mask_for(req)?;
            let n = req.tokens.len();

            let started = Instant::now();
            let mut plan = retriever.match_request(req, &mask, &pool, policy)?;
            let retrieval_ms = if cfg.measure_retrieval {
                started.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            };
            if let Some(cap) = cfg.match_cap {
                apply_match_cap(&mut plan, n, cap);
            }
            for a in &plan.assignments {
                if let crate::retriever::AssignmentSource::PoolEntry(id) = a.source {
                    pool.touch(id, clock)?;
                }
            }

            let covered = plan.covered_tokens();
            let recompute = plan.recompute_positions.len();
            let ttft = cfg.cost.ttft_ms(n, covered, recompute);

            // Post-inference phase: detect already done; annotate and store.
            let attention = gen_attention(
                n,
                &AttentionGenParams {
                    seed: cfg.attention.seed.wrapping_add(ordinal),
                    ..cfg.attention.clone()
                },
            )?;
            let annotation = annotate_request(req, &mask, attention, &cfg.annotator, &params)?;
            let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
            if role == "reader" {
                for a in &plan.assignments {
                    *histogram.entry(a.len).or_default() += 1;
                }
            } else {
                for seg in &annotation.segments {
                    *histogram.entry(seg.len()).or_default() += 1;
                }
            }
            for seg in annotation.segments {
                pool.insert(seg, clock)?;
            }
            retriever.observe_request(req, &mask, policy);
            victims.push((req.clone(), truth.clone()));

            per_request.push(RequestMetrics {
                policy: policy.to_string(),
                request_id: req.request_id.clone(),
                role: role.to_string(),
                match_rate: plan.stats.match_rate,
                recompute_rate: plan.stats.recompute_rate,
                ttft_sim_ms: ttft,
                retrieval_ms,
                segments_used: plan.assignments.len(),
                windows_scanned: plan.stats.windows_scanned,
                candidates: plan.stats.candidates,
                segment_length_histogram: histogram,
            });
            ordinal += 1;
        }
    }

    let readers: Vec<&RequestMetrics> = per_request.iter().filter(|m| m.role == "reader").collect();
    let nr = readers.len().max(1) as f64;
    let mut ttfts: Vec<f64> = readers.iter().map(|m| m.ttft_sim_ms).collect();
    ttfts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let stored_segments = pool.len();
    let stored_tokens = pool.total_tokens();
    let aggregate = AggregateMetrics {
        policy: policy.to_string(),
        requests: per_request.len(),
        readers: readers.len(),
        hit_rate: readers.iter().filter(|m| m.match_rate > 0.0).count() as f64 / nr,
        mean_match_rate: readers.iter().map(|m| m.match_rate).sum::<f64>() / nr,
        mean_recompute_rate: readers.iter().map(|m| m.recompute_rate).sum::<f64>() / nr,
        mean_ttft_ms: readers.iter().map(|m| m.ttft_sim_ms).sum::<f64>() / nr,
        p50_ttft_ms: percentile(&ttfts, 0.50),
        p95_ttft_ms: percentile(&ttfts, 0.95),
        mean_retrieval_ms: readers.iter().map(|m| m.retrieval_ms).sum::<f64>() / nr,
        mean_candidates: readers.iter().map(|m| m.candidates as f64).sum::<f64>() / nr,
        stored_tokens,
        stored_segments,
        mean_stored_segment_len: if stored_segments == 0 {
            0.0
        } else {
            stored_tokens as f64 / stored_segments as f64
        },
    };
    Ok(ServingRun {
        pool,
        retriever,
        metrics: Metrics {
            per_request,
            aggregate,
        },
        victims,
    })
}

/// Writes per-request metrics as CSV.
pub fn write_metrics_csv<W: std::io::Write>(metrics: &[Metrics], mut w: W) -> Result<()> {
    writeln!(
        w,
        "policy,request_id,role,match_rate,recompute_rate,ttft_sim_ms,retrieval_ms,segments_used,windows_scanned,candidates"
    )?;
    for m in metrics {
        for r in &m.per_request {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                r.policy,
                r.request_id,
                r.role,
                r.match_rate,
                r.recompute_rate,
                r.ttft_sim_ms,
                r.retrieval_ms,
                r.segments_used,
                r.windows_scanned,
                r.candidates
            )?;
        }
    }
    Ok(())
}

/// Writes one aggregate row per run as CSV.
pub fn write_aggregate_csv<W: std::io::Write>(metrics: &[Metrics], mut w: W) -> Result<()> {
    writeln!(
        w,
        "policy,requests,readers,hit_rate,mean_match_rate,mean_recompute_rate,mean_ttft_ms,p50_ttft_ms,p95_ttft_ms,mean_retrieval_ms,mean_candidates,stored_tokens,stored_segments,mean_stored_segment_len"
    )?;
    for m in metrics {
        let a = &m.aggregate;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            a.policy,
            a.requests,
            a.readers,
            a.hit_rate,
            a.mean_match_rate,
            a.mean_recompute_rate,
            a.mean_ttft_ms,
            a.p50_ttft_ms,
            a.p95_ttft_ms,
            a.mean_retrieval_ms,
            a.mean_candidates,
            a.stored_tokens,
            a.stored_segments,
            a.mean_stored_segment_len
        )?;
    }
    Ok(())
}
