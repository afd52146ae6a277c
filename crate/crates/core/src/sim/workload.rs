//! Synthetic writer/reader request pairs: a shared public span planted at
//! jittered offsets inside otherwise independent user text, with seeded
//! ground-truth sensitivity over the user regions.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Region, Request, SensitivityMask, TokenId, TokenSeq};

/// Workload geometry and randomness knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadParams {
    pub num_pairs: usize,
    pub prompt_len: usize,
    /// Length of the token span shared verbatim between writer and reader.
    pub shared_span_len: usize,
    /// Maximum forward shift of the span's position in the reader.
    pub shared_span_offset_jitter: usize,
    /// Probability a user-region token is sensitive in ground truth.
    pub sensitive_density: f64,
    pub vocab_size: u32,
    pub seed: u64,
}

impl WorkloadParams {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_len == 0 || self.vocab_size == 0 {
            return Err(Error::config("prompt_len and vocab_size must be positive"));
        }
        if self.shared_span_len + self.shared_span_offset_jitter > self.prompt_len {
            return Err(Error::config(format!(
                "shared span {} plus jitter {} does not fit in prompt of {}",
                self.shared_span_len, self.shared_span_offset_jitter, self.prompt_len
            )));
        }
        if !(0.0..=1.0).contains(&self.sensitive_density) {
            return Err(Error::config("sensitive_density outside [0, 1]"));
        }
        Ok(())
    }
}

/// One writer/reader pair with its ground-truth masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadPair {
    pub writer: Request,
    pub reader: Request,
    pub writer_truth: SensitivityMask,
    pub reader_truth: SensitivityMask,
}

fn build_request(
    id: String,
    user: String,
    rng: &mut ChaCha8Rng,
    span: &[TokenId],
    span_offset: usize, // 0-based start of the span
    params: &WorkloadParams,
) -> (Request, SensitivityMask) {
    let n = params.prompt_len;
    let mut tokens: Vec<TokenId> = (0..n)
        .map(|_| TokenId(rng.gen_range(0..params.vocab_size)))
        .collect();
    let mut labels = vec![Region::User; n];
    tokens[span_offset..span_offset + span.len()].copy_from_slice(span);
    for l in labels.iter_mut().skip(span_offset).take(span.len()) {
        *l = Region::Public;
    }
    let bits: Vec<bool> = labels
        .iter()
        .map(|&lab| lab == Region::User && rng.gen_bool(params.sensitive_density))
        .collect();
    let truth = SensitivityMask(bits);
    let req = Request {
        request_id: id,
        user_id: user,
        tokens: TokenSeq::new(tokens),
        region_labels: labels,
        mask_override: Some(truth.clone()),
    };
    (req, truth)
}

/// Generates `num_pairs` writer/reader pairs. Writer and reader carry the
/// same shared span (identical token ids) at offsets differing by a seeded
/// jitter; all other positions are independent random user text, sensitive
/// with the configured density. Deterministic per seed.
pub fn gen_workload(params: &WorkloadParams) -> Result<Vec<WorkloadPair>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut out = Vec::with_capacity(params.num_pairs);
    for k in 0..params.num_pairs {
        let span: Vec<TokenId> = (0..params.shared_span_len)
            .map(|_| TokenId(rng.gen_range(0..params.vocab_size)))
            .collect();
        let jitter = if params.shared_span_offset_jitter == 0 {
            0
        } else {
            rng.gen_range(0..=params.shared_span_offset_jitter)
        };
        let max_writer_off = params.prompt_len - params.shared_span_len - jitter;
        let writer_off = if max_writer_off == 0 {
            0
        } else {
            rng.gen_range(0..=max_writer_off)
        };
        let (writer, writer_truth) = build_request(
            format!("w{k:04}"),
            format!("user-w{k:04}"),
            &mut rng,
            &span,
            writer_off,
            params,
        );
        let (reader, reader_truth) = build_request(
            format!("r{k:04}"),
            format!("user-r{k:04}"),
            &mut rng,
            &span,
            writer_off + jitter,
            params,
        );
        out.push(WorkloadPair {
            writer,
            reader,
            writer_truth,
            reader_truth,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> WorkloadParams {
        WorkloadParams {
            num_pairs: 8,
            prompt_len: 64,
            shared_span_len: 24,
            shared_span_offset_jitter: 4,
            sensitive_density: 0.2,
            vocab_size: 4096,
            seed: 9,
        }
    }

    fn span_offset(req: &Request) -> Option<usize> {
        req.region_labels.iter().position(|&l| l == Region::Public)
    }

    #[test]
    fn pairs_share_the_span_verbatim() {
        for pair in gen_workload(&params()).unwrap() {
            let (wo, ro) = (
                span_offset(&pair.writer).unwrap(),
                span_offset(&pair.reader).unwrap(),
            );
            assert!(ro >= wo && ro - wo <= 4);
            let w = &pair.writer.tokens.as_slice()[wo..wo + 24];
            let r = &pair.reader.tokens.as_slice()[ro..ro + 24];
            assert_eq!(w, r);
        }
    }

    #[test]
    fn zero_density_zero_jitter_identical_over_span() {
        let p = WorkloadParams {
            sensitive_density: 0.0,
            shared_span_offset_jitter: 0,
            ..params()
        };
        for pair in gen_workload(&p).unwrap() {
            let wo = span_offset(&pair.writer).unwrap();
            let ro = span_offset(&pair.reader).unwrap();
            assert_eq!(wo, ro);
            assert_eq!(
                &pair.writer.tokens.as_slice()[wo..wo + 24],
                &pair.reader.tokens.as_slice()[wo..wo + 24]
            );
            assert_eq!(pair.writer_truth.count_ones(), 0);
            assert_eq!(pair.reader_truth.count_ones(), 0);
        }
    }

    #[test]
    fn full_span_pairs_are_identical_requests() {
        // Span covering the whole prompt with no jitter models the
        // constructed-then-original flow: the pair differs nowhere.
        let p = WorkloadParams {
            prompt_len: 48,
            shared_span_len: 48,
            shared_span_offset_jitter: 0,
            sensitive_density: 0.5, // no user region, so density is moot
            ..params()
        };
        for pair in gen_workload(&p).unwrap() {
            assert_eq!(pair.writer.tokens, pair.reader.tokens);
            assert_eq!(pair.writer_truth.count_ones(), 0);
        }
    }

    #[test]
    fn sensitive_never_in_public_region() {
        for pair in gen_workload(&params()).unwrap() {
            for (i, &label) in pair.writer.region_labels.iter().enumerate() {
                if label == Region::Public {
                    assert!(!pair.writer_truth.0[i]);
                }
            }
        }
    }

    #[test]
    fn density_matches_binomial_expectation() {
        // Ground-truth sensitive counts across many pairs stay within 4
        // sigma of the binomial mean.
        let p = WorkloadParams {
            num_pairs: 200,
            prompt_len: 100,
            shared_span_len: 20,
            shared_span_offset_jitter: 0,
            sensitive_density: 0.1,
            vocab_size: 4096,
            seed: 31,
        };
        let pairs = gen_workload(&p).unwrap();
        let user_positions = 200 * 2 * 80; // 80 user tokens per request
        let ones: usize = pairs
            .iter()
            .map(|pr| pr.writer_truth.count_ones() + pr.reader_truth.count_ones())
            .sum();
        let mean = user_positions as f64 * 0.1;
        let sigma = (user_positions as f64 * 0.1 * 0.9).sqrt();
        assert!(
            (ones as f64 - mean).abs() < 4.0 * sigma,
            "{ones} vs {mean} +/- {sigma}"
        );
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(gen_workload(&params()).unwrap(), gen_workload(&params()).unwrap());
        let other = WorkloadParams {
            seed: 10,
            ..params()
        };
        assert_ne!(gen_workload(&params()).unwrap(), gen_workload(&other).unwrap());
    }

    #[test]
    fn infeasible_geometry_rejected() {
        let p = WorkloadParams {
            prompt_len: 20,
            shared_span_len: 18,
            shared_span_offset_jitter: 4,
            ..params()
        };
        assert!(gen_workload(&p).is_err());
    }
}
