//! Learned vector quantization of feature rows.
//!
//! Each level keeps a codebook `D` of `2^b` rows. During training a vertex
//! holds a row of logits `C[i]`; the forward pass uses the hard lookup
//! `D[argmax C[i]]` while gradients flow through the soft mixture
//! `softmax(C[i])·D`. Baking keeps only the argmax indices.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{softmax_into, Matrix, NodeId, Tape};

pub const MAX_BITWIDTH: u8 = 16;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum VqError {
    #[error("bitwidth must be in 1..={MAX_BITWIDTH}, got {0}")]
    InvalidBitwidth(u8),
    #[error("index {index} out of range for a {rows}-row codebook")]
    IndexOutOfRange { index: u32, rows: usize },
    #[error("codebook must be {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    CodebookShape {
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("codebook contains non-finite entries")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqConfig {
    pub bitwidth: u8,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self { bitwidth: 6 }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<(), VqError> {
        check_bitwidth(self.bitwidth)
    }

    pub fn codebook_rows(&self) -> usize {
        1 << self.bitwidth
    }
}

fn check_bitwidth(b: u8) -> Result<(), VqError> {
    if (1..=MAX_BITWIDTH).contains(&b) {
        Ok(())
    } else {
        Err(VqError::InvalidBitwidth(b))
    }
}

/// The `2^b × k` matrix of shared feature rows for one level.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    bitwidth: u8,
    rows: Matrix,
}

impl Codebook {
    pub fn new(bitwidth: u8, rows: Matrix) -> Result<Self, VqError> {
        check_bitwidth(bitwidth)?;
        let expected = 1usize << bitwidth;
        if rows.rows() != expected || rows.cols() == 0 {
            return Err(VqError::CodebookShape {
                expected_rows: expected,
                expected_cols: rows.cols().max(1),
                rows: rows.rows(),
                cols: rows.cols(),
            });
        }
        if !rows.is_finite() {
            return Err(VqError::NonFinite);
        }
        Ok(Self { bitwidth, rows })
    }

    /// Entries drawn from `N(0, std²)`.
    pub fn random<R: Rng + ?Sized>(
        bitwidth: u8,
        feature_dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self, VqError> {
        check_bitwidth(bitwidth)?;
        let n = (1usize << bitwidth) * feature_dim;
        let dist = Normal::new(0.0, std).expect("finite std");
        let values = (0..n).map(|_| dist.sample(rng)).collect();
        Self::new(
            bitwidth,
            Matrix::from_vec(1 << bitwidth, feature_dim, values),
        )
    }

    pub fn bitwidth(&self) -> u8 {
        self.bitwidth
    }

    pub fn feature_dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    pub fn matrix(&self) -> &Matrix {
        &self.rows
    }

    /// Mutable access for optimizers; shape must be preserved.
    pub fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }
}

/// Integer codebook indices for one level, each below `2^b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexGrid {
    bitwidth: u8,
    indices: Vec<u32>,
}

impl IndexGrid {
    pub fn new(bitwidth: u8, indices: Vec<u32>) -> Result<Self, VqError> {
        check_bitwidth(bitwidth)?;
        let rows = 1usize << bitwidth;
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= rows) {
            return Err(VqError::IndexOutOfRange { index: bad, rows });
        }
        Ok(Self { bitwidth, indices })
    }

    pub fn bitwidth(&self) -> u8 {
        self.bitwidth
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.indices
    }

    pub fn get(&self, i: usize) -> u32 {
        self.indices[i]
    }
}

/// `softmax(c_row) · D` at temperature 1.
pub fn soft_features(c_row: &[f64], codebook: &Codebook) -> Vec<f64> {
    assert_eq!(
        c_row.len(),
        codebook.len(),
        "logit row width must equal codebook size"
    );
    let mut p = vec![0.0; c_row.len()];
    softmax_into(c_row, &mut p);
    let mut out = vec![0.0; codebook.feature_dim()];
    for (j, &w) in p.iter().enumerate() {
        for (o, d) in out.iter_mut().zip(codebook.row(j)) {
            *o += w * d;
        }
    }
    out
}

/// `D[index]`.
pub fn hard_features(index: u32, codebook: &Codebook) -> Result<Vec<f64>, VqError> {
    if index as usize >= codebook.len() {
        return Err(VqError::IndexOutOfRange {
            index,
            rows: codebook.len(),
        });
    }
    Ok(codebook.row(index as usize).to_vec())
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise argmax of soft index logits.
pub fn bake(logits: &Matrix, bitwidth: u8) -> Result<IndexGrid, VqError> {
    let indices = (0..logits.rows())
        .map(|r| argmax(logits.row(r)) as u32)
        .collect();
    IndexGrid::new(bitwidth, indices)
}

/// `D[V]` for a whole level.
pub fn lookup_rows(indices: &IndexGrid, codebook: &Codebook) -> Matrix {
    let k = codebook.feature_dim();
    let mut out = Matrix::zeros(indices.len(), k);
    for (i, &v) in indices.as_slice().iter().enumerate() {
        out.row_mut(i).copy_from_slice(codebook.row(v as usize));
    }
    out
}

/// Straight-through codebook lookup on a tape: emits `D[argmax C]` forward,
/// differentiates as `softmax(C)·D`. `logits` is `m × 2^b`, `codebook` is
/// `2^b × k`.
pub fn ste_lookup(tape: &mut Tape, logits: NodeId, codebook: NodeId) -> NodeId {
    let c = tape.value(logits);
    let rows: Vec<u32> = (0..c.rows()).map(|r| argmax(c.row(r)) as u32).collect();
    let hard = tape.gather(codebook, rows);
    let probs = tape.softmax_rows(logits);
    let soft = tape.matmul(probs, codebook);
    tape.straight_through(hard, soft)
}

/// Size in bits of a raw fp16 grid over the size of `b`-bit indices plus
/// one fp16 codebook: `16mk / (mb + k·2^b)`.
pub fn compression_ratio(m: f64, k: f64, b: f64) -> f64 {
    16.0 * m * k / (m * b + k * b.exp2())
}

/// Bytes of one fp16 codebook.
pub fn codebook_bytes(bitwidth: u8, feature_dim: usize) -> usize {
    (1usize << bitwidth) * feature_dim * 2
}

/// Bytes of `m` packed `b`-bit indices.
pub fn index_bytes(m: usize, bitwidth: u8) -> usize {
    (m * bitwidth as usize).div_ceil(8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, ForwardMode};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn book(rows: &[Vec<f64>]) -> Codebook {
        let b = (rows.len() as f64).log2() as u8;
        Codebook::new(b, Matrix::from_rows(rows)).unwrap()
    }

    #[test]
    fn uniform_logits_average_rows() {
        let d = book(&[
            vec![1.0, 0.0],
            vec![3.0, 2.0],
            vec![-1.0, 4.0],
            vec![5.0, 2.0],
        ]);
        let got = soft_features(&[0.7; 4], &d);
        assert!((got[0] - 2.0).abs() < 1e-12 && (got[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn two_row_mixture() {
        let d = book(&[vec![4.0, 0.0], vec![0.0, 8.0]]);
        let got = soft_features(&[0.0, 3f64.ln()], &d);
        assert!((got[0] - 1.0).abs() < 1e-12);
        assert!((got[1] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn saturated_logit_approaches_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = Codebook::random(4, 8, 1.0, &mut rng).unwrap();
        let mut logits = vec![0.0; 16];
        logits[5] = 20.0;
        let got = soft_features(&logits, &d);
        let row = d.row(5);
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let err: f64 = got
            .iter()
            .zip(row)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err / norm < 1e-3);
    }

    #[test]
    fn hard_lookup_and_range_check() {
        let d = book(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]);
        assert_eq!(hard_features(2, &d).unwrap(), vec![3.0]);
        let eye = book(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(hard_features(0, &eye).unwrap(), vec![1.0, 0.0]);
        assert_eq!(
            hard_features(4, &d).unwrap_err(),
            VqError::IndexOutOfRange { index: 4, rows: 4 }
        );
    }

    #[test]
    fn bake_examples() {
        let c = Matrix::from_rows(&[vec![0.1, 5.0, -2.0, 0.0]]);
        assert_eq!(bake(&c, 2).unwrap().as_slice(), &[1]);
        let tie = Matrix::from_rows(&[vec![1.0, 1.0]]);
        assert_eq!(bake(&tie, 1).unwrap().as_slice(), &[0]);
    }

    #[test]
    fn ste_forward_is_hard_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = Codebook::random(3, 4, 1.0, &mut rng).unwrap();
        let c = Matrix::from_vec(
            100,
            8,
            (0..800).map(|_| rng.random_range(-2.0..2.0)).collect(),
        );
        let mut tape = Tape::new();
        let cn = tape.param(c.clone());
        let dn = tape.param(d.matrix().clone());
        let out = ste_lookup(&mut tape, cn, dn);
        let expected = lookup_rows(&bake(&c, 3).unwrap(), &d);
        assert_eq!(tape.value(out), &expected);
    }

    #[test]
    fn ste_gradient_matches_soft_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = Matrix::from_vec(3, 8, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect());
        let d = Matrix::from_vec(8, 4, (0..32).map(|_| rng.random_range(-1.0..1.0)).collect());
        let w = Matrix::from_vec(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
        let report = grad_check(
            |t, p| {
                let z = ste_lookup(t, p[0], p[1]);
                t.weighted_sum(z, w.clone())
            },
            &[c.clone(), d.clone()],
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-6), "{report:?}");

        // The hard forward is locally constant in C, yet C receives gradient.
        let mut tape = Tape::with_mode(ForwardMode::Hard);
        let cn = tape.param(c);
        let dn = tape.param(d);
        let z = ste_lookup(&mut tape, cn, dn);
        let loss = tape.weighted_sum(z, w);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(cn).unwrap().data().iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn compression_ratio_values() {
        let r = compression_ratio(1e6, 16.0, 6.0);
        assert!((r - 42.66).abs() < 0.01, "{r}");
        let limit = compression_ratio(1e18, 16.0, 6.0);
        assert!((limit - 16.0 * 16.0 / 6.0).abs() < 1e-9);
    }

    #[test]
    fn byte_accounting() {
        assert_eq!(codebook_bytes(6, 16), 2048);
        assert_eq!(index_bytes(1000, 6), 750);
        assert_eq!(index_bytes(3, 3), 2);
    }

    #[test]
    fn soft_approaches_hard_with_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = Codebook::random(3, 5, 1.0, &mut rng).unwrap();
        let base: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gaps: Vec<f64> = [5.0, 10.0, 20.0]
            .iter()
            .map(|&margin| {
                let mut row = base.clone();
                let top = base.iter().copied().fold(f64::MIN, f64::max);
                row[2] = top + margin;
                let s = soft_features(&row, &d);
                s.iter()
                    .zip(d.row(2))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in prop::collection::vec(-30.0f64..30.0, 1..64)) {
            let mut p = vec![0.0; row.len()];
            softmax_into(&row, &mut p);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn argmax_invariant_to_shift_and_scale(
            row in prop::collection::vec(-10.0f64..10.0, 2..32),
            shift in -100.0f64..100.0,
            scale in 0.01f64..100.0,
        ) {
            let moved: Vec<f64> = row.iter().map(|v| v * scale + shift).collect();
            // Shifting can merge near-equal values; only compare when the
            // original maximum is strictly unique by a safe margin.
            let best = argmax(&row);
            let unique = row.iter().enumerate().all(|(i, &v)| i == best || row[best] - v > 1e-6);
            prop_assume!(unique);
            prop_assert_eq!(argmax(&moved), best);
        }
    }
}
