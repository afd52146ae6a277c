//! The single self-describing run configuration document. Flags only
//! override keys in it; every seed is explicit so runs are reproducible
//! from checked-in configs.

use serde::{Deserialize, Serialize};

use kvsieve_core::sim::{
    AttackParams, AttentionGenParams, CostModel, DetectionConfig, ServingConfig, WorkloadParams,
};
use kvsieve_core::{AnnotatorConfig, PoolConfig, SharingPolicy};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub hash_seed: u64,
    pub annotator: AnnotatorConfig,
    pub pool: PoolConfig,
    pub attention: AttentionGenParams,
    pub cost: CostModel,
    pub detection: DetectionConfig,
    pub workload: WorkloadParams,
    /// Policies to run in `serve`; sweeps and attacks use the first
    /// cross-user-capable policy unless overridden.
    pub policies: Vec<SharingPolicy>,
    #[serde(default)]
    pub attack: Option<AttackParams>,
    #[serde(default)]
    pub match_cap: Option<f64>,
    #[serde(default)]
    pub measure_retrieval: bool,
}

impl RunConfig {
    pub fn serving(&self) -> ServingConfig {
        ServingConfig {
            annotator: self.annotator,
            pool: self.pool,
            hash_seed: self.hash_seed,
            attention: self.attention.clone(),
            cost: self.cost,
            detection: self.detection.clone(),
            match_cap: self.match_cap,
            measure_retrieval: self.measure_retrieval,
        }
    }

    pub fn validate(&self) -> kvsieve_core::Result<()> {
        self.serving().validate()?;
        self.workload.validate()?;
        if self.policies.is_empty() {
            return Err(kvsieve_core::Error::Config(
                "config lists no policies".into(),
            ));
        }
        Ok(())
    }

    pub fn attack_params(&self) -> AttackParams {
        self.attack.clone().unwrap_or(AttackParams {
            window_len: self.pool.window_len,
            budget: 10_000_000,
            enumerate_alphabet: false,
            max_alphabet: 64,
            try_extension: true,
        })
    }
}
