//! Masked Gram-matrix protocol.
//!
//! All silos derive a tall common mask `A` (δ×f, δ > f) from the shared seed.
//! Each silo draws its own random left inverse `L_i` (`L_i A = I_f`) and
//! uploads `X̃_i = X_i L_i`. The aggregator holds only `K = A Aᵀ`, and
//!
//! ```text
//! X̃_i K X̃_jᵀ = X_i (L_i A)(L_j A)ᵀ X_jᵀ = X_i X_jᵀ
//! ```
//!
//! so it recovers every pairwise dot product, and from those the cosine
//! distances, without seeing a latent vector.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Split;
use crate::rng::{derive_rng, SeededRng};

/// Latents with a norm below this are rejected before masking.
pub const NORM_EPS: f64 = 1e-12;
/// Default gap between masked width δ and latent width f.
pub const DEFAULT_EXTRA_DIMS: usize = 16;
const MAX_CONDITION: f64 = 1e12;
const MAX_REDRAWS: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum FlakeError {
    #[error("masked width {delta} must exceed latent width {f}")]
    Width { f: usize, delta: usize },
    #[error("common mask stayed rank deficient or ill-conditioned after {0} redraws")]
    RankDeficient(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("row {row} (id {id}) has non-positive self dot product {value}")]
    NonPositiveDiagonal { row: usize, id: u64, value: f64 },
    #[error("latent row {0} has (near) zero norm")]
    ZeroNorm(usize),
    #[error("cannot fuse an empty list of distance matrices")]
    NoMembers,
}

/// Row-major dense matrix; the form matrices take on the wire.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, FlakeError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(FlakeError::Dimension("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_na(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_na(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter());
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    /// `u64 rows | u64 cols | rows*cols f64`, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.data.len());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FlakeError> {
        if bytes.len() < 16 {
            return Err(FlakeError::Dimension("matrix header truncated".into()));
        }
        let rows = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| FlakeError::Dimension("matrix size overflows".into()))?;
        if body.len() != expected {
            return Err(FlakeError::Dimension(format!(
                "{rows}x{cols} matrix needs {expected} bytes, got {}",
                body.len()
            )));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { rows, cols, data })
    }
}

/// Shared mask `A` and the aggregator helper `K = A Aᵀ`.
#[derive(Clone, Debug)]
pub struct CommonMask {
    pub a: DMatrix<f64>,
    pub k: DMatrix<f64>,
}

impl CommonMask {
    pub fn from_matrix(a: DMatrix<f64>) -> Result<Self, FlakeError> {
        if a.nrows() <= a.ncols() {
            return Err(FlakeError::Width {
                f: a.ncols(),
                delta: a.nrows(),
            });
        }
        let k = &a * a.transpose();
        Ok(Self { a, k })
    }

    pub fn f(&self) -> usize {
        self.a.ncols()
    }

    pub fn delta(&self) -> usize {
        self.a.nrows()
    }

    pub fn helper(&self) -> Matrix {
        Matrix::from_na(&self.k)
    }
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> DMatrix<f64> {
    // fill row-major so the draw order matches the wire layout
    let data: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    DMatrix::from_row_slice(rows, cols, &data)
}

/// Condition number of `AᵀA`, infinite when `A` is rank deficient.
pub fn gram_condition(a: &DMatrix<f64>) -> f64 {
    let sv = a.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= f64::EPSILON * max * a.nrows().max(a.ncols()) as f64 {
        f64::INFINITY
    } else {
        (max / min).powi(2)
    }
}

/// Numerical rank via singular values.
pub fn rank(a: &DMatrix<f64>) -> usize {
    let sv = a.singular_values();
    let tol = sv.max() * f64::EPSILON * a.nrows().max(a.ncols()) as f64;
    sv.iter().filter(|&&s| s > tol).count()
}

/// `A` with i.i.d. standard normal entries drawn from `(seed, label)`.
/// A draw that is rank deficient or has `cond(AᵀA) > 1e12` is redrawn from
/// `"<label>/redraw=<k>"`, at most three times.
pub fn gen_common_mask(seed: u64, label: &str, f: usize, delta: usize) -> Result<CommonMask, FlakeError> {
    if delta <= f || f == 0 {
        return Err(FlakeError::Width { f, delta });
    }
    for attempt in 0..=MAX_REDRAWS {
        let stream = if attempt == 0 {
            label.to_string()
        } else {
            format!("{label}/redraw={attempt}")
        };
        let a = normal_matrix(delta, f, &mut derive_rng(seed, stream));
        if gram_condition(&a) <= MAX_CONDITION {
            return CommonMask::from_matrix(a);
        }
    }
    Err(FlakeError::RankDeficient(MAX_REDRAWS))
}

/// A silo's private left inverse of `A`.
#[derive(Clone, Debug)]
pub struct LeftInverse {
    pub l: DMatrix<f64>,
}

impl LeftInverse {
    /// `max |L A - I|`.
    pub fn residual(&self, cm: &CommonMask) -> f64 {
        let la = &self.l * &cm.a;
        let eye = DMatrix::<f64>::identity(cm.f(), cm.f());
        (la - eye).amax()
    }
}

/// `L = A⁺ + R (I - A A⁺)` with `A⁺ = (AᵀA)⁻¹Aᵀ` and `R` an f×δ standard
/// normal matrix from `silo_rng`.
pub fn sample_left_inverse(cm: &CommonMask, silo_rng: &mut SeededRng) -> Result<LeftInverse, FlakeError> {
    let r = normal_matrix(cm.f(), cm.delta(), silo_rng);
    left_inverse_with(cm, &r)
}

pub fn left_inverse_with(cm: &CommonMask, r: &DMatrix<f64>) -> Result<LeftInverse, FlakeError> {
    if r.nrows() != cm.f() || r.ncols() != cm.delta() {
        return Err(FlakeError::Dimension("R must be f x delta".into()));
    }
    let ata = cm.a.transpose() * &cm.a;
    let inv = ata
        .cholesky()
        .ok_or(FlakeError::RankDeficient(0))?
        .inverse();
    let pinv = inv * cm.a.transpose();
    let proj = DMatrix::<f64>::identity(cm.delta(), cm.delta()) - &cm.a * &pinv;
    Ok(LeftInverse { l: pinv + r * proj })
}

/// Per-row metadata the silos share in plaintext alongside masked rows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMeta {
    pub id: u64,
    pub label: usize,
    pub silo: usize,
    pub split: Split,
}

/// One silo's upload for one ensemble member.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedEmbeddings {
    pub silo: usize,
    pub member: usize,
    pub rows: Matrix,
    pub meta: Vec<RowMeta>,
}

/// Rejects rows whose norm falls below [`NORM_EPS`].
pub fn check_norms(x: &Matrix) -> Result<(), FlakeError> {
    for r in 0..x.rows {
        let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n >= NORM_EPS) {
            return Err(FlakeError::ZeroNorm(r));
        }
    }
    Ok(())
}

/// `X̃ = X L`.
pub fn mask_embeddings(x: &Matrix, l: &LeftInverse) -> Result<Matrix, FlakeError> {
    if x.cols != l.l.nrows() {
        return Err(FlakeError::Dimension(format!(
            "latent width {} vs left inverse {}x{}",
            x.cols,
            l.l.nrows(),
            l.l.ncols()
        )));
    }
    Ok(Matrix::from_na(&(x.to_na() * &l.l)))
}

/// Symmetric matrix over pooled rows plus their metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledMatrix {
    pub values: Matrix,
    pub meta: Vec<RowMeta>,
}

pub type GramMatrix = LabeledMatrix;
pub type DistanceMatrix = LabeledMatrix;

/// `a K bᵀ`.
pub fn cross_gram(k: &Matrix, a: &Matrix, b: &Matrix) -> Result<Matrix, FlakeError> {
    if a.cols != k.rows || b.cols != k.cols || k.rows != k.cols {
        return Err(FlakeError::Dimension(format!(
            "masked widths {} / {} vs helper {}x{}",
            a.cols, b.cols, k.rows, k.cols
        )));
    }
    let ak = a.to_na() * k.to_na();
    Ok(Matrix::from_na(&(ak * b.to_na().transpose())))
}

/// Gram matrix over the pooled uploads, in upload order.
pub fn compute_gram(k: &Matrix, pooled: &[&MaskedEmbeddings]) -> Result<GramMatrix, FlakeError> {
    let delta = k.rows;
    if let Some(bad) = pooled.iter().find(|m| m.rows.cols != delta) {
        return Err(FlakeError::Dimension(format!(
            "silo {} sent width {}, helper is {delta}",
            bad.silo, bad.rows.cols
        )));
    }
    let n: usize = pooled.iter().map(|m| m.rows.rows).sum();
    let mut stacked = Vec::with_capacity(n * delta);
    let mut meta = Vec::with_capacity(n);
    for m in pooled {
        stacked.extend_from_slice(&m.rows.data);
        meta.extend(m.meta.iter().cloned());
    }
    let x = Matrix {
        rows: n,
        cols: delta,
        data: stacked,
    };
    let g = cross_gram(k, &x, &x)?;
    Ok(LabeledMatrix {
        values: symmetrize(g),
        meta,
    })
}

fn symmetrize(mut g: Matrix) -> Matrix {
    let n = g.rows;
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (g.data[i * n + j] + g.data[j * n + i]);
            g.data[i * n + j] = v;
            g.data[j * n + i] = v;
        }
    }
    g
}

/// Plaintext Gram matrix `X Xᵀ`.
pub fn plain_gram(x: &Matrix) -> Matrix {
    let xn = x.to_na();
    symmetrize(Matrix::from_na(&(&xn * xn.transpose())))
}

/// `D(p,q) = 1 - G(p,q) / (sqrt(G(p,p)) sqrt(G(q,q)))`, zero diagonal.
pub fn cosine_distance_matrix(g: &GramMatrix) -> Result<DistanceMatrix, FlakeError> {
    let n = g.values.rows;
    let mut norms = Vec::with_capacity(n);
    for p in 0..n {
        let v = g.values.get(p, p);
        if !(v > 0.0) {
            return Err(FlakeError::NonPositiveDiagonal {
                row: p,
                id: g.meta.get(p).map_or(p as u64, |m| m.id),
                value: v,
            });
        }
        norms.push(v.sqrt());
    }
    let mut d = Matrix::zeros(n, n);
    for p in 0..n {
        for q in p + 1..n {
            let v = 1.0 - g.values.get(p, q) / (norms[p] * norms[q]);
            d.data[p * n + q] = v;
            d.data[q * n + p] = v;
        }
    }
    Ok(LabeledMatrix {
        values: d,
        meta: g.meta.clone(),
    })
}

/// Element-wise mean of per-member distance matrices.
pub fn ensemble_distance(members: &[DistanceMatrix]) -> Result<DistanceMatrix, FlakeError> {
    let first = members.first().ok_or(FlakeError::NoMembers)?;
    let mut acc = first.values.clone();
    for m in &members[1..] {
        if m.values.rows != acc.rows || m.values.cols != acc.cols || m.meta != first.meta {
            return Err(FlakeError::Dimension("member matrices disagree in shape or rows".into()));
        }
        for (a, b) in acc.data.iter_mut().zip(&m.values.data) {
            *a += b;
        }
    }
    let scale = members.len() as f64;
    acc.data.iter_mut().for_each(|v| *v /= scale);
    Ok(LabeledMatrix {
        values: acc,
        meta: first.meta.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(n: usize, silo: usize) -> Vec<RowMeta> {
        (0..n)
            .map(|i| RowMeta {
                id: (silo * 1000 + i) as u64,
                label: i % 3,
                silo,
                split: Split::Gallery,
            })
            .collect()
    }

    fn hand_mask() -> CommonMask {
        CommonMask::from_matrix(DMatrix::from_row_slice(2, 1, &[2.0, 1.0])).unwrap()
    }

    #[test]
    fn hand_left_inverses() {
        let cm = hand_mask();
        for l in [[0.5, 0.0], [0.0, 1.0], [0.25, 0.5]] {
            let li = LeftInverse {
                l: DMatrix::from_row_slice(1, 2, &l),
            };
            assert!(li.residual(&cm) < 1e-15);
        }
        let pinv = left_inverse_with(&cm, &DMatrix::zeros(1, 2)).unwrap();
        assert!((pinv.l[(0, 0)] - 0.4).abs() < 1e-15);
        assert!((pinv.l[(0, 1)] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn hand_masking_and_gram() {
        let cm = hand_mask();
        assert_eq!(cm.helper().data, vec![4.0, 2.0, 2.0, 1.0]);
        let l1 = LeftInverse {
            l: DMatrix::from_row_slice(1, 2, &[0.5, 0.0]),
        };
        let l2 = LeftInverse {
            l: DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
        };
        let x1 = mask_embeddings(&Matrix::from_rows(&[vec![3.0]]).unwrap(), &l1).unwrap();
        assert_eq!(x1.data, vec![1.5, 0.0]);
        let x2 = mask_embeddings(&Matrix::from_rows(&[vec![2.0]]).unwrap(), &l2).unwrap();
        let up1 = MaskedEmbeddings {
            silo: 1,
            member: 0,
            rows: x1,
            meta: meta(1, 1),
        };
        let up2 = MaskedEmbeddings {
            silo: 2,
            member: 0,
            rows: x2,
            meta: meta(1, 2),
        };
        let g = compute_gram(&cm.helper(), &[&up1, &up2]).unwrap();
        assert_eq!(g.values.get(0, 1), 6.0);
        assert_eq!(g.values.get(0, 0), 9.0);
        assert_eq!(g.values.get(1, 1), 4.0);
    }

    #[test]
    fn masking_is_linear_and_zero_preserving() {
        let cm = gen_common_mask(3, "t", 4, 8).unwrap();
        let l = sample_left_inverse(&cm, &mut derive_rng(3, "silo")).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 0.5, 3.0]]).unwrap();
        let zero = mask_embeddings(&Matrix::zeros(1, 4), &l).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));
        let mx = mask_embeddings(&x, &l).unwrap();
        let x3 = Matrix {
            data: x.data.iter().map(|v| 3.0 * v).collect(),
            ..x.clone()
        };
        let m3 = mask_embeddings(&x3, &l).unwrap();
        for (a, b) in mx.data.iter().zip(&m3.data) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
        assert!(mask_embeddings(&Matrix::zeros(1, 5), &l).is_err());
    }

    #[test]
    fn common_mask_determinism_and_rank() {
        let a = gen_common_mask(7, "flake/common", 8, 24).unwrap();
        let b = gen_common_mask(7, "flake/common", 8, 24).unwrap();
        assert_eq!(a.a, b.a);
        for seed in 0..100 {
            let cm = gen_common_mask(seed, "flake/common", 8, 24).unwrap();
            assert_eq!(rank(&cm.a), 8);
            let k = &cm.k;
            assert_eq!(k, &k.transpose());
            let eig = k.clone().symmetric_eigenvalues();
            assert!(eig.iter().all(|&e| e >= -1e-9));
        }
        assert_eq!(gen_common_mask(0, "x", 4, 4).unwrap_err(), FlakeError::Width { f: 4, delta: 4 });
    }

    #[test]
    fn rank_deficient_matrix_detected() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert_eq!(rank(&a), 1);
        assert!(gram_condition(&a).is_infinite());
    }

    #[test]
    fn left_inverse_residual_small() {
        for seed in 0..100 {
            let cm = gen_common_mask(seed, "flake/common", 16, 32).unwrap();
            let l = sample_left_inverse(&cm, &mut derive_rng(seed, "silo/1")).unwrap();
            assert!(l.residual(&cm) <= 1e-9, "seed {seed}: {}", l.residual(&cm));
        }
    }

    fn direct_cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        1.0 - dot / (na * nb)
    }

    #[test]
    fn masked_gram_matches_plaintext() {
        let (f, delta) = (8, 24);
        let cm = gen_common_mask(11, "flake/common", f, delta).unwrap();
        let mut rng = derive_rng(11, "data");
        let mut uploads = Vec::new();
        let mut plain_rows = Vec::new();
        for silo in 1..=3 {
            let rows: Vec<Vec<f64>> = (0..20)
                .map(|_| (0..f).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            plain_rows.extend(rows.clone());
            let x = Matrix::from_rows(&rows).unwrap();
            let l = sample_left_inverse(&cm, &mut derive_rng(11, format!("silo/{silo}"))).unwrap();
            uploads.push(MaskedEmbeddings {
                silo,
                member: 0,
                rows: mask_embeddings(&x, &l).unwrap(),
                meta: meta(20, silo),
            });
        }
        let refs: Vec<&MaskedEmbeddings> = uploads.iter().collect();
        let g = compute_gram(&cm.helper(), &refs).unwrap();
        let plain = plain_gram(&Matrix::from_rows(&plain_rows).unwrap());
        let scale = plain.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = g
            .values
            .data
            .iter()
            .zip(&plain.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err / scale <= 1e-8, "relative error {}", err / scale);

        let d = cosine_distance_matrix(&g).unwrap();
        for p in 0..60 {
            assert_eq!(d.values.get(p, p), 0.0);
            for q in 0..60 {
                assert_eq!(d.values.get(p, q), d.values.get(q, p));
                let want = if p == q { 0.0 } else { direct_cosine(&plain_rows[p], &plain_rows[q]) };
                assert!((d.values.get(p, q) - want).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn cosine_distance_hand_values() {
        let x = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let g = LabeledMatrix {
            values: plain_gram(&x),
            meta: meta(4, 1),
        };
        let d = cosine_distance_matrix(&g).unwrap();
        assert!((d.values.get(0, 1) - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-15);
        assert!((d.values.get(0, 1) - 0.2928932).abs() < 1e-7);
        assert_eq!(d.values.get(1, 2), 1.0);
        assert!(d.values.get(0, 3).abs() < 1e-15);
    }

    #[test]
    fn non_positive_diagonal_names_row() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let g = LabeledMatrix {
            values: plain_gram(&x),
            meta: meta(2, 4),
        };
        assert_eq!(
            cosine_distance_matrix(&g).unwrap_err(),
            FlakeError::NonPositiveDiagonal {
                row: 1,
                id: 4001,
                value: 0.0
            }
        );
        assert_eq!(check_norms(&x).unwrap_err(), FlakeError::ZeroNorm(1));
    }

    #[test]
    fn ensemble_fusion() {
        let zero = LabeledMatrix {
            values: Matrix::zeros(2, 2),
            meta: meta(2, 1),
        };
        let mut one = zero.clone();
        one.values.data = vec![0.0, 1.0, 1.0, 0.0];
        assert_eq!(ensemble_distance(&[zero.clone()]).unwrap(), zero);
        assert_eq!(ensemble_distance(&[one.clone(), one.clone()]).unwrap(), one);
        let mid = ensemble_distance(&[zero.clone(), one]).unwrap();
        assert_eq!(mid.values.data, vec![0.0, 0.5, 0.5, 0.0]);
        let wrong = LabeledMatrix {
            values: Matrix::zeros(3, 3),
            meta: meta(3, 1),
        };
        assert!(ensemble_distance(&[zero, wrong]).is_err());
        assert_eq!(ensemble_distance(&[]).unwrap_err(), FlakeError::NoMembers);
    }

    #[test]
    fn matrix_bytes_round_trip() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-4.0, 0.5, 6.0]]).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..16], &[2, 0, 0, 0, 0, 0, 0, 0, 3, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[16..24], &1.0f64.to_le_bytes());
        assert_eq!(Matrix::from_bytes(&bytes).unwrap(), m);
        assert!(Matrix::from_bytes(&bytes[..20]).is_err());
    }

    #[test]
    fn distinct_left_inverses_same_gram() {
        let cm = gen_common_mask(2, "c", 4, 12).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![0.5, -1.0, 0.0, 2.0]]).unwrap();
        let l1 = sample_left_inverse(&cm, &mut derive_rng(2, "a")).unwrap();
        let l2 = sample_left_inverse(&cm, &mut derive_rng(2, "b")).unwrap();
        assert!((&l1.l - &l2.l).amax() > 1e-3);
        let g1 = cross_gram(&cm.helper(), &mask_embeddings(&x, &l1).unwrap(), &mask_embeddings(&x, &l1).unwrap()).unwrap();
        let g2 = cross_gram(&cm.helper(), &mask_embeddings(&x, &l1).unwrap(), &mask_embeddings(&x, &l2).unwrap()).unwrap();
        for (a, b) in g1.data.iter().zip(&g2.data) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
