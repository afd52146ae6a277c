//! Synthetic attention matrices: distance decay, diagonal boost, optional
//! locality blocks, and seeded jitter, normalized to exact row sums.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sat::AttentionMatrix;

/// A locality block: attention between positions inside `[start, end]`
/// (1-based inclusive) is multiplied by `boost`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSpan {
    pub start: usize,
    pub end: usize,
    pub boost: f64,
}

/// Generator knobs for synthetic attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionGenParams {
    /// Distance-decay rate: weight of `(i, j)` falls as `exp(-lambda * (i-j))`.
    pub lambda_decay: f64,
    /// Additive boost on the diagonal before normalization.
    pub self_weight: f64,
    #[serde(default)]
    pub block_spans: Vec<BlockSpan>,
    pub seed: u64,
}

impl Default for AttentionGenParams {
    fn default() -> Self {
        AttentionGenParams {
            lambda_decay: 0.5,
            self_weight: 1.0,
            block_spans: Vec::new(),
            seed: 0,
        }
    }
}

/// Relative amplitude of the seeded multiplicative jitter.
const JITTER: f64 = 0.25;

/// Generates a causal row-stochastic attention matrix. Rows are normalized
/// to sum to one exactly (up to float rounding); the upper triangle is zero.
pub fn gen_attention(n: usize, params: &AttentionGenParams) -> Result<AttentionMatrix> {
    if n < 1 {
        return Err(Error::invalid("attention dimension must be >= 1"));
    }
    if params.lambda_decay <= 0.0 || params.self_weight < 0.0 {
        return Err(Error::invalid(
            "lambda_decay must be positive and self_weight nonnegative",
        ));
    }
    for b in &params.block_spans {
        if b.start < 1 || b.end > n || b.start > b.end || b.boost <= 0.0 {
            return Err(Error::invalid(format!(
                "bad block span ({}, {}) boost {}",
                b.start, b.end, b.boost
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut rows = Vec::with_capacity(n);
    for i in 1..=n {
        let mut row = vec![0.0f64; n];
        let mut sum = 0.0;
        for j in 1..=i {
            let mut w = (-params.lambda_decay * (i - j) as f64).exp();
            if i == j {
                w += params.self_weight;
            }
            for b in &params.block_spans {
                if b.start <= j && i <= b.end && b.start <= i {
                    w *= b.boost;
                }
            }
            w *= 1.0 + JITTER * rng.gen_range(-1.0..1.0);
            row[j - 1] = w;
            sum += w;
        }
        for cell in row.iter_mut().take(i) {
            *cell /= sum;
        }
        rows.push(row);
    }
    AttentionMatrix::from_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_is_unit() {
        let m = gen_attention(1, &AttentionGenParams::default()).unwrap();
        assert_eq!(m.at(1, 1), 1.0);
    }

    #[test]
    fn huge_decay_approaches_identity() {
        let params = AttentionGenParams {
            lambda_decay: 50.0,
            self_weight: 0.0,
            block_spans: Vec::new(),
            seed: 3,
        };
        let m = gen_attention(16, &params).unwrap();
        for i in 1..=16 {
            assert!(m.at(i, i) > 1.0 - 1e-9, "diagonal row {i}: {}", m.at(i, i));
        }
    }

    #[test]
    fn rows_sum_to_one_upper_triangle_zero() {
        for seed in 0..10 {
            let params = AttentionGenParams {
                lambda_decay: 0.3,
                self_weight: 2.0,
                block_spans: vec![BlockSpan {
                    start: 4,
                    end: 9,
                    boost: 8.0,
                }],
                seed,
            };
            let n = 24;
            let m = gen_attention(n, &params).unwrap();
            for i in 1..=n {
                let sum: f64 = (1..=i).map(|j| m.at(i, j)).sum();
                assert!((sum - 1.0).abs() <= 1e-12, "row {i} sums to {sum}");
                for j in i + 1..=n {
                    assert_eq!(m.at(i, j), 0.0);
                }
            }
            m.validate().unwrap();
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let params = AttentionGenParams {
            seed: 42,
            ..Default::default()
        };
        assert_eq!(
            gen_attention(12, &params).unwrap(),
            gen_attention(12, &params).unwrap()
        );
        let other = AttentionGenParams {
            seed: 43,
            ..Default::default()
        };
        assert_ne!(
            gen_attention(12, &params).unwrap(),
            gen_attention(12, &other).unwrap()
        );
    }

    #[test]
    fn block_boost_concentrates_mass() {
        let base = AttentionGenParams {
            lambda_decay: 0.1,
            self_weight: 0.0,
            block_spans: vec![BlockSpan {
                start: 5,
                end: 12,
                boost: 100.0,
            }],
            seed: 1,
        };
        let m = gen_attention(20, &base).unwrap();
        // A row inside the block keeps most of its mass inside the block.
        let inside: f64 = (5..=10).map(|j| m.at(10, j)).sum();
        assert!(inside > 0.9, "in-block mass {inside}");
    }
}
