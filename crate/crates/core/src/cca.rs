//! Canonical correlation analysis of the regularized adjusted cross-covariance
//! `Sigma_r^{-1/2} Sigma_rx Sigma_x^{-1/2}`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::moments::{estimate_moments, sym_inv_sqrt, MomentConfig, MomentError, MomentEstimates};

#[derive(Debug, Error, PartialEq)]
pub enum CcaError {
    #[error(transparent)]
    Moment(#[from] MomentError),
    #[error("singular value decomposition did not converge")]
    SvdFailure,
    #[error("truncation k = {k} outside 1..={max}")]
    InvalidK { k: usize, max: usize },
    #[error("number of permutations must be at least 1")]
    NoPermutations,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Canonical correlations and directions.
///
/// `u`/`v` are the singular vectors of the whitened cross-covariance and have
/// orthonormal columns; `q_r = Sigma_r^{-1/2} u` and `q_x = Sigma_x^{-1/2} v`
/// are the canonical directions in the original asset and signal coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CcaDecomposition {
    /// Canonical correlations, descending.
    pub s: DVector<f64>,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub q_r: DMatrix<f64>,
    pub q_x: DMatrix<f64>,
}

impl CcaDecomposition {
    pub fn k(&self) -> usize {
        self.s.len()
    }

    pub fn squared(&self) -> DVector<f64> {
        self.s.map(|s| s * s)
    }

    /// `U diag(s) V'`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (j, mut col) in us.column_iter_mut().enumerate() {
            col *= self.s[j];
        }
        us * self.v.transpose()
    }

    /// Keep the `k` largest canonical pairs.
    pub fn truncate(&self, k: usize) -> Result<Self, CcaError> {
        truncate(self, k)
    }

    /// Flip column `i` of every factor jointly.
    pub fn flip(&mut self, i: usize) {
        for m in [&mut self.u, &mut self.v, &mut self.q_r, &mut self.q_x] {
            m.column_mut(i).neg_mut();
        }
    }
}

/// `Sigma_r^{-1/2} Sigma_rx Sigma_x^{-1/2}` with floored inverse roots.
pub fn adjusted_cross_cov(m: &MomentEstimates) -> Result<DMatrix<f64>, CcaError> {
    let (wr, wx) = whiteners(m)?;
    Ok(&wr * &m.sigma_rx * &wx)
}

fn whiteners(m: &MomentEstimates) -> Result<(DMatrix<f64>, DMatrix<f64>), CcaError> {
    let n = m.sigma_r.nrows();
    let nm = m.sigma_x.nrows();
    if m.sigma_rx.shape() != (n, nm) {
        return Err(CcaError::ShapeMismatch(format!(
            "sigma_rx is {:?}, expected ({n}, {nm})",
            m.sigma_rx.shape()
        )));
    }
    let wr = sym_inv_sqrt(&m.sigma_r, m.eig_floor_rel)?;
    let wx = sym_inv_sqrt(&m.sigma_x, m.eig_floor_rel)?;
    Ok((wr, wx))
}

/// `(s, U, V)`.
pub type Svd = (DVector<f64>, DMatrix<f64>, DMatrix<f64>);

/// Thin SVD of an `n x p` matrix with singular values sorted descending and
/// each left vector's largest-magnitude entry made positive (right vector
/// follows). Returns `(s, U, V)` with `min(n, p)` columns.
pub fn sorted_svd(a: &DMatrix<f64>) -> Result<Svd, CcaError> {
    if a.nrows() > a.ncols() {
        let (s, v, u) = wide_svd(&a.transpose())?;
        return Ok(apply_sign_convention(s, u, v));
    }
    let (s, u, v) = wide_svd(a)?;
    Ok(apply_sign_convention(s, u, v))
}

/// Thin SVD of a matrix with `rows <= cols` via the eigendecomposition of
/// `A A'`: `U` from its eigenvectors, then `S V' = U' A`. Reconstruction stays
/// accurate for rank-deficient input, where iterative bidiagonal SVD
/// occasionally fails to converge to a valid factorization.
fn wide_svd(a: &DMatrix<f64>) -> Result<Svd, CcaError> {
    let n = a.nrows();
    if a.iter().any(|v| !v.is_finite()) {
        return Err(CcaError::SvdFailure);
    }
    let gram = a * a.transpose();
    let eig = SymmetricEigen::try_new((&gram + gram.transpose()) * 0.5, f64::EPSILON, 0)
        .ok_or(CcaError::SvdFailure)?;
    let u = eig.eigenvectors;
    let b = u.transpose() * a;
    let norms: Vec<f64> = (0..n).map(|i| b.row(i).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let s = DVector::from_iterator(n, order.iter().map(|&i| norms[i]));
    let u = u.select_columns(&order);
    let tol = s.get(0).copied().unwrap_or(0.0) * 1e-13 * a.ncols() as f64;
    let mut v = DMatrix::zeros(a.ncols(), n);
    let mut kept = 0;
    for (c, &i) in order.iter().enumerate() {
        if s[c] > tol && s[c] > 0.0 {
            v.set_column(c, &(b.row(i).transpose() / s[c]));
            kept += 1;
        }
    }
    complete_orthonormal(&mut v, kept);
    Ok((s, u, v))
}

/// Fill columns `kept..` of `v` with unit vectors orthogonal to all earlier columns.
fn complete_orthonormal(v: &mut DMatrix<f64>, kept: usize) {
    let dim = v.nrows();
    let mut col = kept;
    for e in 0..dim {
        if col == v.ncols() {
            break;
        }
        let mut cand = DVector::zeros(dim);
        cand[e] = 1.0;
        for _ in 0..2 {
            for j in 0..col {
                let proj = v.column(j).dot(&cand);
                cand -= v.column(j) * proj;
            }
        }
        let norm = cand.norm();
        if norm > 1e-8 {
            v.set_column(col, &(cand / norm));
            col += 1;
        }
    }
}

fn apply_sign_convention(
    s: DVector<f64>,
    mut u: DMatrix<f64>,
    mut v: DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    for j in 0..s.len() {
        if leading_sign(u.column(j).iter().copied()) < 0.0 {
            u.column_mut(j).neg_mut();
            v.column_mut(j).neg_mut();
        }
    }
    (s, u, v)
}

/// Sign of the largest-magnitude entry (first one on ties); `1.0` for a zero vector.
fn leading_sign(values: impl Iterator<Item = f64>) -> f64 {
    let mut best = 0.0_f64;
    for v in values {
        if v.abs() > best.abs() {
            best = v;
        }
    }
    if best < 0.0 {
        -1.0
    } else {
        1.0
    }
}

pub fn cca_decompose(m: &MomentEstimates) -> Result<CcaDecomposition, CcaError> {
    let (wr, wx) = whiteners(m)?;
    let adjusted = &wr * &m.sigma_rx * &wx;
    let (s, u, v) = sorted_svd(&adjusted)?;
    let q_r = &wr * &u;
    let q_x = &wx * &v;
    Ok(CcaDecomposition { s, u, v, q_r, q_x })
}

pub fn truncate(decomp: &CcaDecomposition, k: usize) -> Result<CcaDecomposition, CcaError> {
    let max = decomp.k();
    if k == 0 || k > max {
        return Err(CcaError::InvalidK { k, max });
    }
    Ok(CcaDecomposition {
        s: decomp.s.rows(0, k).into_owned(),
        u: decomp.u.columns(0, k).into_owned(),
        v: decomp.v.columns(0, k).into_owned(),
        q_r: decomp.q_r.columns(0, k).into_owned(),
        q_x: decomp.q_x.columns(0, k).into_owned(),
    })
}

/// Null distribution of squared canonical correlations.
///
/// Each replica shuffles the time order of every signal column independently
/// and reruns estimation and decomposition. Replica `i` draws from stream `i`
/// of a ChaCha generator seeded with `seed`, so the output (one row per
/// replica) does not depend on scheduling.
pub fn permutation_null(
    returns: &DMatrix<f64>,
    signals: &DMatrix<f64>,
    cfg: &MomentConfig,
    n_perms: usize,
    seed: u64,
) -> Result<DMatrix<f64>, CcaError> {
    if n_perms == 0 {
        return Err(CcaError::NoPermutations);
    }
    let rows: Vec<DVector<f64>> = (0..n_perms)
        .into_par_iter()
        .map(|replica| {
            let mut rng = replica_rng(seed, replica as u64);
            let shuffled = shuffle_columns(signals, &mut rng);
            let m = estimate_moments(returns, &shuffled, cfg)?;
            Ok(cca_decompose(&m)?.squared())
        })
        .collect::<Result<_, CcaError>>()?;
    let k = rows[0].len();
    Ok(DMatrix::from_fn(n_perms, k, |i, j| rows[i][j]))
}

pub(crate) fn replica_rng(seed: u64, replica: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica);
    rng
}

fn shuffle_columns(data: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut out = data.clone();
    let mut idx: Vec<usize> = (0..data.nrows()).collect();
    for j in 0..data.ncols() {
        idx.shuffle(rng);
        for (dst, &src) in idx.iter().enumerate() {
            out[(dst, j)] = data[(src, j)];
        }
    }
    out
}
