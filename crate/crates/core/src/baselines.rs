//! Non-learned compressors for trained feature grids: low-rank
//! approximation in the KLT basis, k-means vector quantization, and frozen
//! random indices standing in for a hash table.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diffcore::Matrix;
use crate::field::NeuralField;
use crate::grid::{GridError, LevelData};
use crate::vq::{Codebook, IndexGrid, VqError};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("input rows contain non-finite values")]
    NonFinite,
    #[error("input has no rows")]
    Empty,
    #[error("retained coefficient count {retain} must be in 1..={dim}")]
    RetainOutOfRange { retain: usize, dim: usize },
    #[error("transform was fit on width {expected}, input has width {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("baselines apply to uncompressed models; level {0} is quantized")]
    Quantized(usize),
    #[error(transparent)]
    Vq(#[from] VqError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Eigenbasis of the feature covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct KltTransform {
    /// `k × k`, one eigenvector per column, by descending eigenvalue.
    pub basis: Matrix,
    pub mean: Vec<f64>,
    pub eigenvalues: Vec<f64>,
}

/// Fits the KLT on rows of `z`. The covariance is normalized by `m`, so the
/// eigenvalue tail equals the truncation error exactly. Each eigenvector's
/// largest-magnitude component is made positive.
pub fn klt_fit(z: &Matrix) -> Result<KltTransform, BaselineError> {
    if !z.is_finite() {
        return Err(BaselineError::NonFinite);
    }
    let (m, k) = z.shape();
    if m == 0 {
        return Err(BaselineError::Empty);
    }
    let mut mean = vec![0.0; k];
    for r in 0..m {
        for (mu, v) in mean.iter_mut().zip(z.row(r)) {
            *mu += v;
        }
    }
    mean.iter_mut().for_each(|mu| *mu /= m as f64);

    let mut cov = DMatrix::<f64>::zeros(k, k);
    for r in 0..m {
        let row = z.row(r);
        for i in 0..k {
            let di = row[i] - mean[i];
            for j in i..k {
                cov[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..k {
        for j in i..k {
            let v = cov[(i, j)] / m as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut basis = Matrix::zeros(k, k);
    let mut eigenvalues = Vec::with_capacity(k);
    for (col, &src) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(src);
        let mut pivot = 0;
        for i in 1..k {
            if v[i].abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..k {
            basis.set(i, col, sign * v[i]);
        }
        eigenvalues.push(eig.eigenvalues[src].max(0.0));
    }
    Ok(KltTransform {
        basis,
        mean,
        eigenvalues,
    })
}

/// Keeps the first `retain` KLT coefficients of every row and maps back:
/// `μ + ((Z − μ)Â)[:, :f] Â[:, :f]ᵀ`.
pub fn klt_truncate(z: &Matrix, t: &KltTransform, retain: usize) -> Result<Matrix, BaselineError> {
    let k = t.mean.len();
    if z.cols() != k {
        return Err(BaselineError::WidthMismatch {
            expected: k,
            got: z.cols(),
        });
    }
    if retain == 0 || retain > k {
        return Err(BaselineError::RetainOutOfRange { retain, dim: k });
    }
    let mut out = Matrix::zeros(z.rows(), k);
    let mut centered = vec![0.0; k];
    let mut coeffs = vec![0.0; retain];
    for r in 0..z.rows() {
        for ((c, v), mu) in centered.iter_mut().zip(z.row(r)).zip(&t.mean) {
            *c = v - mu;
        }
        for (j, coef) in coeffs.iter_mut().enumerate() {
            *coef = (0..k).map(|i| centered[i] * t.basis.get(i, j)).sum();
        }
        let row = out.row_mut(r);
        for (i, v) in row.iter_mut().enumerate() {
            *v = t.mean[i]
                + (0..retain)
                    .map(|j| coeffs[j] * t.basis.get(i, j))
                    .sum::<f64>();
        }
    }
    Ok(out)
}

/// fp16 coefficient payload of a rank-`retain` approximation of `m` rows.
pub fn lra_payload_bytes(m: usize, retain: usize) -> usize {
    m * retain * 2
}

/// Clustering of feature rows into `2^b` centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub bitwidth: u8,
    /// `2^b × k`.
    pub centroids: Matrix,
    pub assignments: Vec<u32>,
    /// Final within-cluster sum of squares.
    pub inertia: f64,
    /// Objective after every assignment step.
    pub history: Vec<f64>,
}

impl KMeansResult {
    /// Codebook and indices; needs `b ≥ 1`.
    pub fn into_parts(self) -> Result<(Codebook, IndexGrid), BaselineError> {
        let codebook = Codebook::new(self.bitwidth, self.centroids)?;
        let indices = IndexGrid::new(self.bitwidth, self.assignments)?;
        Ok((codebook, indices))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid, lowest index on ties.
fn nearest(row: &[f64], centroids: &Matrix) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(row, centroids.row(c));
        if d < best.1 {
            best = (c as u32, d);
        }
    }
    best
}

/// Nearest-row assignment of every row of `z` against `codebook`.
pub fn assign_nearest(z: &Matrix, codebook: &Codebook) -> Vec<u32> {
    (0..z.rows())
        .into_par_iter()
        .map(|r| nearest(z.row(r), codebook.matrix()).0)
        .collect()
}

/// Lloyd's algorithm with k-means++ seeding and `2^b` clusters. Empty
/// clusters are re-seeded at the point farthest from its centroid.
/// Deterministic for a given seed.
pub fn kmeans_vq(
    z: &Matrix,
    bitwidth: u8,
    max_iters: usize,
    seed: u64,
) -> Result<KMeansResult, BaselineError> {
    if bitwidth > crate::vq::MAX_BITWIDTH {
        return Err(VqError::InvalidBitwidth(bitwidth).into());
    }
    if !z.is_finite() {
        return Err(BaselineError::NonFinite);
    }
    let (m, k) = z.shape();
    if m == 0 {
        return Err(BaselineError::Empty);
    }
    let clusters = 1usize << bitwidth;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centroids = Matrix::zeros(clusters, k);
    let first = rng.random_range(0..m);
    centroids.row_mut(0).copy_from_slice(z.row(first));
    let mut dist: Vec<f64> = (0..m).map(|r| sq_dist(z.row(r), z.row(first))).collect();
    for c in 1..clusters {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = m - 1;
            for (r, &d) in dist.iter().enumerate() {
                if target < d {
                    chosen = r;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..m)
        };
        centroids.row_mut(c).copy_from_slice(z.row(pick));
        for (r, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(z.row(r), z.row(pick)));
        }
    }

    let assign = |centroids: &Matrix| -> Vec<(u32, f64)> {
        (0..m)
            .into_par_iter()
            .map(|r| nearest(z.row(r), centroids))
            .collect()
    };

    let mut history = Vec::new();
    let mut current = assign(&centroids);
    history.push(current.iter().map(|a| a.1).sum());
    for _ in 0..max_iters {
        let mut sums = Matrix::zeros(clusters, k);
        let mut counts = vec![0usize; clusters];
        for (r, &(c, _)) in current.iter().enumerate() {
            counts[c as usize] += 1;
            for (s, v) in sums.row_mut(c as usize).iter_mut().zip(z.row(r)) {
                *s += v;
            }
        }
        let mut taken = vec![false; m];
        for (c, &count) in counts.iter().enumerate().take(clusters) {
            if count > 0 {
                let n = count as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / n;
                }
            } else {
                // Farthest point not already used for another re-seed.
                let far = (0..m)
                    .filter(|&r| !taken[r])
                    .max_by(|&a, &b| current[a].1.total_cmp(&current[b].1).then(b.cmp(&a)));
                if let Some(r) = far {
                    taken[r] = true;
                    centroids.row_mut(c).copy_from_slice(z.row(r));
                }
            }
        }
        let next = assign(&centroids);
        history.push(next.iter().map(|a| a.1).sum());
        let converged = next.iter().zip(&current).all(|(a, b)| a.0 == b.0);
        current = next;
        if converged {
            break;
        }
    }

    Ok(KMeansResult {
        bitwidth,
        centroids,
        inertia: *history.last().unwrap(),
        assignments: current.into_iter().map(|a| a.0).collect(),
        history,
    })
}

/// Uniform frozen indices in `0..2^b`, reproducible from `seed`.
pub fn random_index_grid(m: usize, bitwidth: u8, seed: u64) -> Result<IndexGrid, BaselineError> {
    if !(1..=crate::vq::MAX_BITWIDTH).contains(&bitwidth) {
        return Err(VqError::InvalidBitwidth(bitwidth).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = 1u32 << bitwidth;
    let indices = (0..m).map(|_| rng.random_range(0..top)).collect();
    Ok(IndexGrid::new(bitwidth, indices)?)
}

fn level_features(field: &NeuralField) -> Result<Vec<&Matrix>, BaselineError> {
    field
        .pyramid
        .level_data()
        .iter()
        .enumerate()
        .map(|(l, d)| match d {
            LevelData::Features(z) => Ok(z),
            _ => Err(BaselineError::Quantized(l)),
        })
        .collect()
}

/// Post-hoc k-means quantization of every level of an uncompressed model,
/// level `ℓ` seeded with `seed + ℓ`.
pub fn kmvq_field(
    field: &NeuralField,
    bitwidth: u8,
    max_iters: usize,
    seed: u64,
) -> Result<NeuralField, BaselineError> {
    let mut codebooks = Vec::new();
    let mut data = Vec::new();
    for (l, z) in level_features(field)?.into_iter().enumerate() {
        let (cb, v) =
            kmeans_vq(z, bitwidth, max_iters, seed.wrapping_add(l as u64))?.into_parts()?;
        codebooks.push(cb);
        data.push(LevelData::Indices(v));
    }
    let mut out = field.clone();
    out.pyramid.replace_data(data)?;
    out.codebooks = codebooks;
    Ok(out)
}

/// Per-level KLT truncation to `retain` coefficients, reconstructed back to
/// full width.
pub fn klt_field(field: &NeuralField, retain: usize) -> Result<NeuralField, BaselineError> {
    let data = level_features(field)?
        .into_iter()
        .map(|z| Ok(LevelData::Features(klt_truncate(z, &klt_fit(z)?, retain)?)))
        .collect::<Result<Vec<_>, BaselineError>>()?;
    let mut out = field.clone();
    out.pyramid.replace_data(data)?;
    Ok(out)
}
