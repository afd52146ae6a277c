//! Summed-area table over an attention matrix: O(n^2) in-place build, O(1)
//! rectangular sums, and the intra/inter attention queries built on them.
//!
//! All indices are 1-based inclusive, matching the formulas; storage is a
//! dense row-major `Vec<f64>` indexed internally at `(i-1) * n + (j-1)`.

use std::io::{Read, Write};

use crate::error::{Error, Result};

const ATTENTION_FILE_MAGIC: &[u8; 8] = b"ATTNMAT1";

/// Dense causal attention score matrix. `A[i][j]` is the weight from token
/// `i` to token `j`; rows sum to 1 and the upper triangle is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    n: usize,
    data: Vec<f64>,
}

/// How far a matrix may drift from row-stochastic before validation fails.
/// Drift within `WARN` is accepted with a log warning; beyond it is an error.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;
pub const ROW_SUM_WARN_TOLERANCE: f64 = 1e-3;

impl AttentionMatrix {
    /// Wraps row-major storage as an `n x n` matrix. Only squareness is
    /// checked here; see [`AttentionMatrix::validate`] for the causal and
    /// row-stochastic invariants.
    pub fn from_row_major(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::LengthMismatch {
                context: "attention matrix storage",
                expected: n * n,
                actual: data.len(),
            });
        }
        Ok(AttentionMatrix { n, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for row in &rows {
            if row.len() != n {
                return Err(Error::LengthMismatch {
                    context: "attention matrix row",
                    expected: n,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(AttentionMatrix { n, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Entry at 1-based `(i, j)`.
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[(i - 1) * self.n + (j - 1)]
    }

    #[cfg(test)]
    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[(i - 1) * self.n + (j - 1)] = v;
    }

    /// Checks causality (zero upper triangle) as a hard error and row sums
    /// against the stochastic tolerance. Mild denormalization (row sums off
    /// by at most `ROW_SUM_WARN_TOLERANCE`) is accepted with a warning, since
    /// exported attention is often not renormalized exactly.
    pub fn validate(&self) -> Result<()> {
        for i in 1..=self.n {
            for j in i + 1..=self.n {
                if self.at(i, j) != 0.0 {
                    return Err(Error::invalid(format!(
                        "attention matrix not causal: A[{i},{j}] = {}",
                        self.at(i, j)
                    )));
                }
            }
        }
        for i in 1..=self.n {
            let mut sum = 0.0;
            for j in 1..=i {
                let v = self.at(i, j);
                if v < 0.0 {
                    return Err(Error::invalid(format!(
                        "attention matrix has negative entry A[{i},{j}] = {v}"
                    )));
                }
                sum += v;
            }
            let drift = (sum - 1.0).abs();
            if drift > ROW_SUM_WARN_TOLERANCE {
                return Err(Error::invalid(format!(
                    "attention row {i} sums to {sum}, beyond tolerance {ROW_SUM_WARN_TOLERANCE}"
                )));
            }
            if drift > ROW_SUM_TOLERANCE {
                log::warn!("attention row {i} sums to {sum}; accepted as mildly denormalized");
            }
        }
        Ok(())
    }

    /// Writes the flat binary format: 8-byte magic, `n` as u64 LE, then
    /// `n^2` f64 LE values in row-major order.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(ATTENTION_FILE_MAGIC)?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads the flat binary format written by [`AttentionMatrix::write_binary`].
    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != ATTENTION_FILE_MAGIC {
            return Err(Error::invalid("bad attention file magic"));
        }
        let mut nbuf = [0u8; 8];
        r.read_exact(&mut nbuf)?;
        let n = u64::from_le_bytes(nbuf) as usize;
        let mut data = vec![0f64; n * n];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        Ok(AttentionMatrix { n, data })
    }
}

/// Summed-area table `T[i,j] = sum of A over [1..i] x [1..j]`, built by
/// overwriting the attention storage in place.
#[derive(Debug, Clone)]
pub struct SummedAreaTable {
    n: usize,
    data: Vec<f64>,
}

/// Builds the table in place: `T[i,j] = A[i,j] + T[i-1,j] + T[i,j-1] - T[i-1,j-1]`
/// with out-of-range terms treated as zero. Consumes the matrix and reuses
/// its storage, so the build needs O(1) extra memory.
pub fn build_in_place(matrix: AttentionMatrix) -> SummedAreaTable {
    let n = matrix.n;
    let mut data = matrix.data;
    for i in 0..n {
        for j in 0..n {
            let up = if i > 0 { data[(i - 1) * n + j] } else { 0.0 };
            let left = if j > 0 { data[i * n + j - 1] } else { 0.0 };
            let diag = if i > 0 && j > 0 {
                data[(i - 1) * n + j - 1]
            } else {
                0.0
            };
            data[i * n + j] += up + left - diag;
        }
    }
    SummedAreaTable { n, data }
}

impl SummedAreaTable {
    pub fn dim(&self) -> usize {
        self.n
    }

    /// `T[i,j]` with out-of-bound (zero) indices treated as zero.
    #[inline]
    fn t(&self, i: usize, j: usize) -> f64 {
        if i == 0 || j == 0 {
            0.0
        } else {
            self.data[(i - 1) * self.n + (j - 1)]
        }
    }

    /// Sum of `A` over rows `[x1, x2]` and columns `[y1, y2]` in O(1).
    pub fn rect_sum(&self, x1: usize, x2: usize, y1: usize, y2: usize) -> Result<f64> {
        if !(1 <= x1 && x1 <= x2 && x2 <= self.n) {
            return Err(Error::Bounds {
                context: "rect_sum rows",
                lo: x1,
                hi: x2,
                n: self.n,
            });
        }
        if !(1 <= y1 && y1 <= y2 && y2 <= self.n) {
            return Err(Error::Bounds {
                context: "rect_sum cols",
                lo: y1,
                hi: y2,
                n: self.n,
            });
        }
        Ok(self.rect_sum_unchecked(x1, x2, y1, y2))
    }

    #[inline]
    pub(crate) fn rect_sum_unchecked(&self, x1: usize, x2: usize, y1: usize, y2: usize) -> f64 {
        self.t(x2, y2) - self.t(x1 - 1, y2) - self.t(x2, y1 - 1) + self.t(x1 - 1, y1 - 1)
    }

    /// Attention the span `[l, r]` pays within itself. On causal input the
    /// triangular sum equals the rectangular sum over `[l,r] x [l,r]`
    /// because the upper-triangle terms are zero.
    pub fn intra_attn(&self, l: usize, r: usize) -> Result<f64> {
        self.rect_sum(l, r, l, r)
    }

    /// Attention the span `[l, r]` pays to tokens preceding it: rows
    /// `[l, r]` times columns `[1, l-1]`. Zero when `l == 1`.
    pub fn inter_attn(&self, l: usize, r: usize) -> Result<f64> {
        if !(1 <= l && l <= r && r <= self.n) {
            return Err(Error::Bounds {
                context: "inter_attn",
                lo: l,
                hi: r,
                n: self.n,
            });
        }
        if l == 1 {
            return Ok(0.0);
        }
        Ok(self.rect_sum_unchecked(l, r, 1, l - 1))
    }

    #[inline]
    pub(crate) fn intra_attn_unchecked(&self, l: usize, r: usize) -> f64 {
        self.rect_sum_unchecked(l, r, l, r)
    }

    #[inline]
    pub(crate) fn inter_attn_unchecked(&self, l: usize, r: usize) -> f64 {
        if l == 1 {
            0.0
        } else {
            self.rect_sum_unchecked(l, r, 1, l - 1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Brute-force double-loop oracle for rectangular sums.
    fn brute_rect(m: &AttentionMatrix, x1: usize, x2: usize, y1: usize, y2: usize) -> f64 {
        let mut s = 0.0;
        for i in x1..=x2 {
            for j in y1..=y2 {
                s += m.at(i, j);
            }
        }
        s
    }

    /// Triangular double-loop oracle for intra attention.
    fn brute_intra(m: &AttentionMatrix, l: usize, r: usize) -> f64 {
        let mut s = 0.0;
        for i in l..=r {
            for j in l..=i {
                s += m.at(i, j);
            }
        }
        s
    }

    fn brute_inter(m: &AttentionMatrix, l: usize, r: usize) -> f64 {
        let mut s = 0.0;
        for i in l..=r {
            for j in 1..l {
                s += m.at(i, j);
            }
        }
        s
    }

    /// Random causal row-stochastic matrix.
    pub(crate) fn random_causal(n: usize, seed: u64) -> AttentionMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::with_capacity(n);
        for i in 1..=n {
            let mut row = vec![0.0; n];
            let mut sum = 0.0;
            for cell in row.iter_mut().take(i) {
                *cell = rng.gen_range(0.0..1.0f64) + 1e-9;
                sum += *cell;
            }
            for cell in row.iter_mut().take(i) {
                *cell /= sum;
            }
            rows.push(row);
        }
        AttentionMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn ones_matrix_table() {
        let m = AttentionMatrix::from_rows(vec![vec![1.0; 3]; 3]).unwrap();
        let t = build_in_place(m);
        // T[i,j] = i * j for the all-ones matrix.
        for i in 1..=3 {
            for j in 1..=3 {
                assert_eq!(t.t(i, j), (i * j) as f64);
            }
        }
    }

    #[test]
    fn zero_matrix_table() {
        let m = AttentionMatrix::from_rows(vec![vec![0.0; 4]; 4]).unwrap();
        let t = build_in_place(m);
        for i in 1..=4 {
            for j in 1..=4 {
                assert_eq!(t.t(i, j), 0.0);
            }
        }
    }

    #[test]
    fn non_square_rejected() {
        assert!(AttentionMatrix::from_rows(vec![vec![1.0, 2.0], vec![3.0]]).is_err());
        assert!(AttentionMatrix::from_row_major(3, vec![0.0; 8]).is_err());
    }

    #[test]
    fn build_matches_double_loop_oracle() {
        let m = random_causal(8, 11);
        let t = build_in_place(m.clone());
        for i in 1..=8 {
            for j in 1..=8 {
                let expect = brute_rect(&m, 1, i, 1, j);
                assert!((t.t(i, j) - expect).abs() <= 1e-12, "T[{i},{j}]");
            }
        }
    }

    #[test]
    fn rect_sum_examples() {
        let n = 5;
        let m = AttentionMatrix::from_rows(vec![vec![1.0; n]; n]).unwrap();
        let t = build_in_place(m);
        assert_eq!(t.rect_sum(1, n, 1, n).unwrap(), (n * n) as f64);
        // x1 = y1 = 1 degenerates to the corner entry.
        assert_eq!(t.rect_sum(1, 3, 1, 4).unwrap(), t.t(3, 4));
        assert!(t.rect_sum(3, 2, 1, 4).is_err());
        assert!(t.rect_sum(1, 2, 0, 4).is_err());
        assert!(t.rect_sum(1, 6, 1, 4).is_err());
    }

    #[test]
    fn rect_sum_matches_brute_force_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..20 {
            let n = rng.gen_range(2..24);
            let m = random_causal(n, seed);
            let t = build_in_place(m.clone());
            for _ in 0..50 {
                let x1 = rng.gen_range(1..=n);
                let x2 = rng.gen_range(x1..=n);
                let y1 = rng.gen_range(1..=n);
                let y2 = rng.gen_range(y1..=n);
                let area = ((x2 - x1 + 1) * (y2 - y1 + 1)) as f64;
                let expect = brute_rect(&m, x1, x2, y1, y2);
                let got = t.rect_sum(x1, x2, y1, y2).unwrap();
                assert!(
                    (got - expect).abs() <= 1e-9 * area.max(1.0),
                    "rect ({x1},{x2},{y1},{y2}): {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn intra_full_range_is_n() {
        let n = 16;
        let m = random_causal(n, 3);
        let t = build_in_place(m);
        let got = t.intra_attn(1, n).unwrap();
        assert!((got - n as f64).abs() <= n as f64 * 1e-6);
    }

    #[test]
    fn intra_singleton_is_diagonal() {
        let n = 10;
        let m = random_causal(n, 4);
        let t = build_in_place(m.clone());
        for i in 1..=n {
            assert!((t.intra_attn(i, i).unwrap() - m.at(i, i)).abs() <= 1e-12);
        }
    }

    #[test]
    fn inter_at_origin_is_zero() {
        let t = build_in_place(random_causal(12, 6));
        for r in 1..=12 {
            assert_eq!(t.inter_attn(1, r).unwrap(), 0.0);
        }
    }

    #[test]
    fn intra_inter_match_brute_force() {
        for seed in 0..10 {
            let n = 24;
            let m = random_causal(n, 100 + seed);
            let t = build_in_place(m.clone());
            for l in 1..=n {
                for r in l..=n {
                    let ia = t.intra_attn(l, r).unwrap();
                    let ie = t.inter_attn(l, r).unwrap();
                    assert!((ia - brute_intra(&m, l, r)).abs() <= 1e-9 * n as f64);
                    assert!((ie - brute_inter(&m, l, r)).abs() <= 1e-9 * n as f64);
                    // Row-stochastic causal input: intra + inter covers each row.
                    let len = (r - l + 1) as f64;
                    assert!((ia + ie - len).abs() <= len * 1e-6);
                }
            }
        }
    }

    #[test]
    fn rect_additivity_and_cell_recovery() {
        let n = 16;
        let m = random_causal(n, 42);
        let t = build_in_place(m.clone());
        // Vertically adjacent regions merge exactly.
        let (a, b) = (
            t.rect_sum(1, 4, 2, 6).unwrap(),
            t.rect_sum(5, 9, 2, 6).unwrap(),
        );
        let merged = t.rect_sum(1, 9, 2, 6).unwrap();
        assert!((a + b - merged).abs() <= 1e-9 * merged.abs().max(1.0));
        // 1x1 regions recover original entries.
        for i in 1..=n {
            for j in 1..=n {
                assert!((t.rect_sum(i, i, j, j).unwrap() - m.at(i, j)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn validate_accepts_stochastic_rejects_denormalized() {
        let m = random_causal(6, 9);
        m.validate().unwrap();

        let mut bad = random_causal(6, 9);
        bad.set(3, 2, bad.at(3, 2) + 0.5);
        assert!(bad.validate().is_err());

        let mut acausal = random_causal(6, 9);
        acausal.set(2, 5, 0.1);
        assert!(acausal.validate().is_err());

        // Mild denormalization passes with a warning.
        let mut mild = random_causal(6, 9);
        mild.set(3, 2, mild.at(3, 2) + 5e-4);
        mild.validate().unwrap();
    }

    #[test]
    fn binary_round_trip() {
        let m = random_causal(9, 77);
        let mut buf = Vec::new();
        m.write_binary(&mut buf).unwrap();
        let back = AttentionMatrix::read_binary(buf.as_slice()).unwrap();
        assert_eq!(m, back);
        assert!(AttentionMatrix::read_binary(&b"NOTMAGIC"[..]).is_err());
    }
}
