//! Simulation kit: synthetic attention and workloads, the serving loop with
//! its TTFT cost model, the probing attack harness, and parameter sweeps.

pub mod attack;
pub mod attention;
pub mod serving;
pub mod sweep;
pub mod workload;

pub use attack::{attack_probe_loop, oracle_for, score_recovery, AttackParams, RecoveryReport};
pub use attention::{gen_attention, AttentionGenParams, BlockSpan};
pub use serving::{
    run_serving, run_serving_full, write_aggregate_csv, write_metrics_csv, AggregateMetrics,
    CostModel, DetectionConfig, DetectionMode, Metrics, RequestMetrics, ServingConfig, ServingRun,
};
pub use sweep::{sweep, write_sweep_csv, SweepAxis, SweepRow};
pub use workload::{gen_workload, WorkloadPair, WorkloadParams};
