//! Pluggable sensitivity detection: user token rules, a dictionary-backed
//! classifier stub with nested privacy levels, and strict region masking,
//! plus seeded false-negative / false-positive mask perturbation for the
//! detection-error studies.

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Region, Request, SensitivityMask};

/// Nested detection strength; higher levels enable strictly more categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrivacyLevel {
    Low,
    Medium,
    High,
}

impl PrivacyLevel {
    pub const ALL: [PrivacyLevel; 3] = [PrivacyLevel::Low, PrivacyLevel::Medium, PrivacyLevel::High];
}

/// One classifier category: enabled whenever the policy level is at or above
/// `level`, so level sets are nested by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub level: PrivacyLevel,
    pub token_ids: BTreeSet<u32>,
}

/// Detection mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Literal token-id sequences; a matched sequence marks all its tokens.
    UserRules { rules: Vec<Vec<u32>> },
    /// Dictionary stub standing in for an NER/LLM classifier: marks tokens
    /// whose id belongs to any enabled category.
    DictionaryClassifier { categories: Vec<Category> },
    /// Marks every user-region token; system and public regions stay clear.
    StrictMasking,
}

/// A detection policy: mechanism plus optional level (dictionary only;
/// absent means all categories are enabled).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionPolicy {
    pub kind: PolicyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<PrivacyLevel>,
}

impl DetectionPolicy {
    pub fn strict() -> Self {
        DetectionPolicy {
            kind: PolicyKind::StrictMasking,
            level: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            PolicyKind::UserRules { rules } => {
                if rules.is_empty() || rules.iter().any(|r| r.is_empty()) {
                    return Err(Error::config("user rules must be non-empty sequences"));
                }
            }
            PolicyKind::DictionaryClassifier { categories } => {
                if categories.is_empty() {
                    return Err(Error::config("dictionary classifier needs categories"));
                }
            }
            PolicyKind::StrictMasking => {}
        }
        Ok(())
    }
}

/// Applies a detection policy. A present `mask_override` is returned
/// verbatim (ground-truth mode); detection never runs in that case.
pub fn apply_policy(req: &Request, policy: &DetectionPolicy) -> Result<SensitivityMask> {
    req.validate()?;
    policy.validate()?;
    if let Some(m) = &req.mask_override {
        return Ok(m.clone());
    }
    let n = req.tokens.len();
    let mut bits = vec![false; n];
    match &policy.kind {
        PolicyKind::UserRules { rules } => {
            for rule in rules {
                let m = rule.len();
                if m > n {
                    continue;
                }
                for start in 1..=n - m + 1 {
                    let matched = (0..m).all(|k| req.tokens.at1(start + k).0 == rule[k]);
                    if matched {
                        for k in 0..m {
                            bits[start + k - 1] = true;
                        }
                    }
                }
            }
        }
        PolicyKind::DictionaryClassifier { categories } => {
            let level = policy.level.unwrap_or(PrivacyLevel::High);
            let mut enabled: BTreeSet<u32> = BTreeSet::new();
            for cat in categories {
                if cat.level <= level {
                    enabled.extend(&cat.token_ids);
                }
            }
            for i in 1..=n {
                if enabled.contains(&req.tokens.at1(i).0) {
                    bits[i - 1] = true;
                }
            }
        }
        PolicyKind::StrictMasking => {
            for i in 1..=n {
                bits[i - 1] = req.region_labels[i - 1] == Region::User;
            }
        }
    }
    Ok(SensitivityMask(bits))
}

/// Seeded detection-error injection rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbParams {
    /// Probability a sensitive bit is missed (1 -> 0).
    pub fn_rate: f64,
    /// Probability a clear bit is over-marked (0 -> 1).
    pub fp_rate: f64,
    pub seed: u64,
}

impl PerturbParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("fn_rate", self.fn_rate), ("fp_rate", self.fp_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Flips each 1-bit to 0 with probability `fn_rate` and each 0-bit to 1 with
/// probability `fp_rate`, independently per position.
///
/// One uniform draw per position is compared against the applicable rate, so
/// for a fixed seed the flipped sets are nested across rates: every bit
/// flipped at a lower rate is also flipped at any higher rate. Sweeps rely
/// on this coupling for per-seed monotonicity.
pub fn perturb_mask(mask: &SensitivityMask, params: &PerturbParams) -> Result<SensitivityMask> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let bits = mask
        .0
        .iter()
        .map(|&b| {
            let u: f64 = rng.gen();
            if b {
                u >= params.fn_rate
            } else {
                u < params.fp_rate
            }
        })
        .collect();
    Ok(SensitivityMask(bits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::TokenSeq;

    fn req(tokens: &[u32], regions: Vec<Region>) -> Request {
        Request {
            request_id: "r".into(),
            user_id: "u".into(),
            tokens: TokenSeq::from_u32(tokens.iter().copied()),
            region_labels: regions,
            mask_override: None,
        }
    }

    fn dictionary() -> DetectionPolicy {
        DetectionPolicy {
            kind: PolicyKind::DictionaryClassifier {
                categories: vec![
                    Category {
                        name: "identifiers".into(),
                        level: PrivacyLevel::Low,
                        token_ids: [10, 11].into(),
                    },
                    Category {
                        name: "contacts".into(),
                        level: PrivacyLevel::Medium,
                        token_ids: [20, 21].into(),
                    },
                    Category {
                        name: "locations".into(),
                        level: PrivacyLevel::High,
                        token_ids: [30].into(),
                    },
                ],
            },
            level: None,
        }
    }

    #[test]
    fn strict_masking_by_region() {
        let r = req(&[1, 2, 3], vec![Region::Public; 3]);
        assert_eq!(
            apply_policy(&r, &DetectionPolicy::strict()).unwrap(),
            SensitivityMask::all_clear(3)
        );
        let r = req(&[1, 2, 3], vec![Region::User; 3]);
        assert_eq!(
            apply_policy(&r, &DetectionPolicy::strict()).unwrap(),
            SensitivityMask::all_set(3)
        );
        let r = req(
            &[1, 2, 3],
            vec![Region::System, Region::User, Region::Public],
        );
        assert_eq!(
            apply_policy(&r, &DetectionPolicy::strict()).unwrap(),
            SensitivityMask::from_bits([0, 1, 0])
        );
    }

    #[test]
    fn override_returned_verbatim() {
        let mut r = req(&[1, 2, 3], vec![Region::User; 3]);
        r.mask_override = Some(SensitivityMask::from_bits([0, 1, 0]));
        assert_eq!(
            apply_policy(&r, &DetectionPolicy::strict()).unwrap(),
            SensitivityMask::from_bits([0, 1, 0])
        );
    }

    #[test]
    fn user_rules_mark_sequences() {
        let policy = DetectionPolicy {
            kind: PolicyKind::UserRules {
                rules: vec![vec![7], vec![3, 4]],
            },
            level: None,
        };
        let r = req(&[3, 4, 7, 3, 3, 4], vec![Region::User; 6]);
        assert_eq!(
            apply_policy(&r, &policy).unwrap(),
            SensitivityMask::from_bits([1, 1, 1, 0, 1, 1])
        );
    }

    #[test]
    fn dictionary_levels_are_nested_and_counts_match() {
        // Tokens: 3x level-low ids, 2x medium, 1x high, rest unmatched.
        let tokens = [10, 11, 10, 20, 21, 30, 1, 2, 3];
        let r = req(&tokens, vec![Region::User; 9]);
        let mut policy = dictionary();
        let mut prev = SensitivityMask::all_clear(9);
        for (level, expect) in [
            (PrivacyLevel::Low, 3),
            (PrivacyLevel::Medium, 5),
            (PrivacyLevel::High, 6),
        ] {
            policy.level = Some(level);
            let mask = apply_policy(&r, &policy).unwrap();
            // Brute-force count of category members at this level.
            assert_eq!(mask.count_ones(), expect, "{level:?}");
            assert!(prev.is_subset_of(&mask), "levels must nest at {level:?}");
            prev = mask;
        }
        // No level means everything enabled.
        policy.level = None;
        assert_eq!(apply_policy(&r, &policy).unwrap().count_ones(), 6);
    }

    #[test]
    fn apply_policy_is_deterministic() {
        let r = req(&[10, 20, 30, 1], vec![Region::User; 4]);
        let p = dictionary();
        assert_eq!(apply_policy(&r, &p).unwrap(), apply_policy(&r, &p).unwrap());
    }

    #[test]
    fn perturb_identity_and_extremes() {
        let mask = SensitivityMask::from_bits([1, 0, 1, 1, 0, 0, 1]);
        let id = perturb_mask(
            &mask,
            &PerturbParams {
                fn_rate: 0.0,
                fp_rate: 0.0,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(id, mask);
        let wiped = perturb_mask(
            &mask,
            &PerturbParams {
                fn_rate: 1.0,
                fp_rate: 0.0,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(wiped, SensitivityMask::all_clear(7));
    }

    #[test]
    fn perturb_flips_only_prescribed_directions() {
        let mask = SensitivityMask::from_bits((0..200).map(|i| (i % 3 == 0) as u8));
        for seed in 0..20 {
            let fn_only = perturb_mask(
                &mask,
                &PerturbParams {
                    fn_rate: 0.5,
                    fp_rate: 0.0,
                    seed,
                },
            )
            .unwrap();
            assert!(fn_only.is_subset_of(&mask), "fp=0 must not add bits");
            let fp_only = perturb_mask(
                &mask,
                &PerturbParams {
                    fn_rate: 0.0,
                    fp_rate: 0.5,
                    seed,
                },
            )
            .unwrap();
            assert!(mask.is_subset_of(&fp_only), "fn=0 must not clear bits");
        }
    }

    #[test]
    fn perturb_nests_across_rates_for_fixed_seed() {
        let mask = SensitivityMask::from_bits((0..300).map(|i| (i % 2 == 0) as u8));
        for seed in 0..10 {
            let mut prev: Option<SensitivityMask> = None;
            for step in 0..=4 {
                let rate = step as f64 * 0.05;
                let out = perturb_mask(
                    &mask,
                    &PerturbParams {
                        fn_rate: rate,
                        fp_rate: rate,
                        seed,
                    },
                )
                .unwrap();
                if let Some(p) = prev {
                    // Each 1-bit cleared at the lower rate stays cleared;
                    // each 0-bit set at the lower rate stays set.
                    for i in 1..=mask.len() {
                        if mask.at1(i) && !p.at1(i) {
                            assert!(!out.at1(i));
                        }
                        if !mask.at1(i) && p.at1(i) {
                            assert!(out.at1(i));
                        }
                    }
                }
                prev = Some(out);
            }
        }
    }

    #[test]
    fn perturb_binomial_statistics() {
        // Mean flipped ones over many seeds stays within 3 sigma of n*p.
        let mask = SensitivityMask::all_set(1000);
        let seeds = 10_000u64;
        let mut total_flipped = 0usize;
        for seed in 0..seeds {
            let out = perturb_mask(
                &mask,
                &PerturbParams {
                    fn_rate: 0.1,
                    fp_rate: 0.0,
                    seed,
                },
            )
            .unwrap();
            total_flipped += 1000 - out.count_ones();
        }
        let mean = total_flipped as f64 / seeds as f64;
        let sigma_mean = (1000.0f64 * 0.1 * 0.9 / seeds as f64).sqrt();
        assert!(
            (mean - 100.0).abs() <= 3.0 * sigma_mean,
            "mean {mean} outside 100 +/- {}",
            3.0 * sigma_mean
        );
    }

    #[test]
    fn invalid_rates_rejected() {
        let mask = SensitivityMask::all_set(4);
        assert!(perturb_mask(
            &mask,
            &PerturbParams {
                fn_rate: 1.5,
                fp_rate: 0.0,
                seed: 0
            }
        )
        .is_err());
    }

    #[test]
    fn policy_json_round_trip() {
        let p = dictionary();
        let s = serde_json::to_string(&p).unwrap();
        let back: DetectionPolicy = serde_json::from_str(&s).unwrap();
        assert_eq!(p, back);
        let rules = DetectionPolicy {
            kind: PolicyKind::UserRules {
                rules: vec![vec![1, 2], vec![9]],
            },
            level: None,
        };
        let s = serde_json::to_string(&rules).unwrap();
        assert_eq!(rules, serde_json::from_str(&s).unwrap());
    }
}
