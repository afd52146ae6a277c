//! Parameter sweeps: one serving run (or attack run, for the detection-error
//! axes) per grid point, with deterministic seeds and CSV emission.

use serde::{Deserialize, Serialize};

use crate::detector::PerturbParams;
use crate::error::{Error, Result};
use crate::retriever::SharingPolicy;
use crate::sim::attack::{attack_probe_loop, oracle_for, score_recovery, AttackParams};
use crate::sim::serving::{run_serving_full, AggregateMetrics, ServingConfig};
use crate::sim::workload::WorkloadPair;
use crate::types::TokenSeq;

/// Which configuration knob the sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Cap on the reused fraction of each request.
    MatchRate,
    /// Recompute fraction rho.
    RecomputeRate,
    /// Minimum segment length (and retrieval window).
    SegmentMinLen,
    /// Detection policy level: 0 = low, 1 = medium, 2 = high.
    PrivacyLevel,
    /// Injected false-negative rate; runs the probing attack per point.
    FnRate,
    /// Injected false-positive rate.
    FpRate,
    /// Fixed-chunk baseline chunk length.
    ChunkSize,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "match_rate" => Ok(SweepAxis::MatchRate),
            "recompute_rate" => Ok(SweepAxis::RecomputeRate),
            "segment_min_len" => Ok(SweepAxis::SegmentMinLen),
            "privacy_level" => Ok(SweepAxis::PrivacyLevel),
            "fn_rate" => Ok(SweepAxis::FnRate),
            "fp_rate" => Ok(SweepAxis::FpRate),
            "chunk_size" => Ok(SweepAxis::ChunkSize),
            other => Err(Error::config(format!("unknown sweep axis '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::MatchRate => "match_rate",
            SweepAxis::RecomputeRate => "recompute_rate",
            SweepAxis::SegmentMinLen => "segment_min_len",
            SweepAxis::PrivacyLevel => "privacy_level",
            SweepAxis::FnRate => "fn_rate",
            SweepAxis::FpRate => "fp_rate",
            SweepAxis::ChunkSize => "chunk_size",
        }
    }
}

/// One grid point's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub aggregate: AggregateMetrics,
    /// Populated on the attack axes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direct_recovery_rate: Option<f64>,
}

fn apply_axis(
    axis: SweepAxis,
    value: f64,
    cfg: &ServingConfig,
    policy: SharingPolicy,
) -> Result<(ServingConfig, SharingPolicy)> {
    let mut cfg = cfg.clone();
    let mut policy = policy;
    match axis {
        SweepAxis::MatchRate => cfg.match_cap = Some(value),
        SweepAxis::RecomputeRate => cfg.annotator.rho = value,
        SweepAxis::SegmentMinLen => {
            let len = value as usize;
            if len < 1 || value.fract() != 0.0 {
                return Err(Error::config(format!("bad segment_min_len {value}")));
            }
            cfg.annotator.min_segment_len = len;
            cfg.pool.window_len = len;
        }
        SweepAxis::PrivacyLevel => {
            use crate::detector::PrivacyLevel::*;
            let level = match value as i64 {
                0 => Low,
                1 => Medium,
                2 => High,
                other => {
                    return Err(Error::config(format!("bad privacy level index {other}")));
                }
            };
            match cfg.detection.policy.as_mut() {
                Some(p) => p.level = Some(level),
                None => {
                    return Err(Error::config(
                        "privacy_level sweep needs a detection policy in the config",
                    ))
                }
            }
            cfg.detection.mode = crate::sim::serving::DetectionMode::Policy;
        }
        SweepAxis::FnRate | SweepAxis::FpRate => {
            let mut p = cfg.perturb_or_default();
            if axis == SweepAxis::FnRate {
                p.fn_rate = value;
            } else {
                p.fp_rate = value;
            }
            cfg.detection.perturb = Some(p);
        }
        SweepAxis::ChunkSize => {
            let len = value as usize;
            if len < 1 || value.fract() != 0.0 {
                return Err(Error::config(format!("bad chunk_size {value}")));
            }
            policy = SharingPolicy::FixedChunk { chunk_len: len };
        }
    }
    Ok((cfg, policy))
}

impl ServingConfig {
    fn perturb_or_default(&self) -> PerturbParams {
        self.detection.perturb.unwrap_or(PerturbParams {
            fn_rate: 0.0,
            fp_rate: 0.0,
            seed: self.hash_seed,
        })
    }
}

/// Runs the grid. Each point runs the serving loop on the same workload with
/// the axis applied; the detection-error axes additionally run the probing
/// attack against the populated pool and report recovery.
pub fn sweep(
    axis: SweepAxis,
    grid: &[f64],
    workload: &[WorkloadPair],
    cfg: &ServingConfig,
    policy: SharingPolicy,
    attack: Option<&AttackParams>,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(grid.len());
    for &value in grid {
        let (point_cfg, point_policy) = apply_axis(axis, value, cfg, policy)?;
        let run = run_serving_full(workload, point_policy, &point_cfg)?;
        let direct_recovery_rate = if matches!(axis, SweepAxis::FnRate | SweepAxis::FpRate) {
            let attack_params = attack.cloned().unwrap_or(AttackParams {
                window_len: point_cfg.pool.window_len,
                budget: 10_000_000,
                enumerate_alphabet: false,
                max_alphabet: 64,
                try_extension: true,
            });
            let hints: Vec<TokenSeq> =
                run.victims.iter().map(|(r, _)| r.tokens.clone()).collect();
            let mut oracle = oracle_for(&run.retriever, &run.pool, point_policy);
            let findings = attack_probe_loop(&mut oracle, &hints, &attack_params)?;
            let report = score_recovery(&findings, &run.pool, &run.victims);
            Some(report.direct_recovery_rate)
        } else {
            None
        };
        rows.push(SweepRow {
            axis: axis.name().to_string(),
            value,
            aggregate: run.metrics.aggregate,
            direct_recovery_rate,
        });
    }
    Ok(rows)
}

/// Writes sweep rows as CSV, one row per grid point.
pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], mut w: W) -> Result<()> {
    writeln!(
        w,
        "axis,value,policy,hit_rate,mean_match_rate,mean_recompute_rate,mean_ttft_ms,stored_tokens,stored_segments,mean_stored_segment_len,direct_recovery_rate"
    )?;
    for r in rows {
        let a = &r.aggregate;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.axis,
            r.value,
            a.policy,
            a.hit_rate,
            a.mean_match_rate,
            a.mean_recompute_rate,
            a.mean_ttft_ms,
            a.stored_tokens,
            a.stored_segments,
            a.mean_stored_segment_len,
            r.direct_recovery_rate
                .map(|v| v.to_string())
                .unwrap_or_default()
        )?;
    }
    Ok(())
}
