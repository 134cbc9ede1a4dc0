//! Closed-form portfolio policies.
//!
//! Matrix policies return the coefficient matrix `A` (`NM x N`) with weights
//! `w = A' x`; vector policies return weights directly. Gross normalization is
//! left to the caller via [`normalize_gross`].

use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cca::{sorted_svd, CcaDecomposition, CcaError};
use crate::moments::{sym_inv, MomentError, MomentEstimates};

/// Largest `N * NM` for which [`kronecker_oracle`] builds the dense Kronecker product.
pub const KRONECKER_MAX_DIM: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error(transparent)]
    Moment(#[from] MomentError),
    #[error(transparent)]
    Cca(#[from] CcaError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("risk aversion must be positive and finite, got {0}")]
    InvalidGamma(f64),
    #[error("Kronecker system of dimension {0} exceeds {KRONECKER_MAX_DIM}")]
    DimensionTooLarge(usize),
    #[error("signal-implied exposure 1'h is zero; fully-invested policy undefined")]
    DivisionDegenerate,
    #[error("linear system is singular")]
    Singular,
    #[error("non-finite policy output")]
    NonFinite,
    #[error("unknown policy '{0}'")]
    UnknownPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PolicyMode {
    /// `L_i = s_i / gamma`.
    #[default]
    Approx,
    /// `L_i = s_i / (gamma (1 + s_i^2))`, the exact maximizer including the
    /// fourth-moment term.
    Full,
}

impl FromStr for PolicyMode {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "approx" => Ok(Self::Approx),
            "full" => Ok(Self::Full),
            _ => Err(PolicyError::UnknownPolicy(s.to_string())),
        }
    }
}

impl fmt::Display for PolicyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Approx => "approx",
            Self::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyMatrix {
    /// `NM x N`.
    pub a: DMatrix<f64>,
    pub gamma: f64,
    pub mode: PolicyMode,
    pub k: usize,
}

impl PolicyMatrix {
    pub fn n_assets(&self) -> usize {
        self.a.ncols()
    }

    pub fn n_signals_total(&self) -> usize {
        self.a.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub w: DVector<f64>,
    pub date: Option<NaiveDate>,
    pub gross: f64,
}

impl WeightVector {
    pub fn new(w: DVector<f64>) -> Self {
        let gross = w.iter().map(|v| v.abs()).sum();
        Self {
            w,
            date: None,
            gross,
        }
    }

    pub fn with_date(mut self, date: NaiveDate) -> Self {
        self.date = Some(date);
        self
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn net(&self) -> f64 {
        self.w.sum()
    }
}

fn check_gamma(gamma: f64) -> Result<(), PolicyError> {
    if gamma.is_finite() && gamma > 0.0 {
        Ok(())
    } else {
        Err(PolicyError::InvalidGamma(gamma))
    }
}

fn check_finite_vec(w: DVector<f64>) -> Result<WeightVector, PolicyError> {
    if w.iter().all(|v| v.is_finite()) {
        Ok(WeightVector::new(w))
    } else {
        Err(PolicyError::NonFinite)
    }
}

fn check_len(what: &str, got: usize, expected: usize) -> Result<(), PolicyError> {
    if got == expected {
        Ok(())
    } else {
        Err(PolicyError::ShapeMismatch(format!(
            "{what} has length {got}, expected {expected}"
        )))
    }
}

/// Diagonal loadings on the canonical pairs.
pub fn canonical_loadings(s: &DVector<f64>, gamma: f64, mode: PolicyMode) -> DVector<f64> {
    match mode {
        PolicyMode::Approx => s / gamma,
        PolicyMode::Full => s.map(|si| si / (gamma * (1.0 + si * si))),
    }
}

/// `A = Q_x diag(L) Q_r'`.
pub fn cp_policy(
    decomp: &CcaDecomposition,
    gamma: f64,
    mode: PolicyMode,
) -> Result<PolicyMatrix, PolicyError> {
    check_gamma(gamma)?;
    let l = canonical_loadings(&decomp.s, gamma, mode);
    let mut qx_l = decomp.q_x.clone();
    for (j, mut col) in qx_l.column_iter_mut().enumerate() {
        col *= l[j];
    }
    let a = qx_l * decomp.q_r.transpose();
    if a.iter().any(|v| !v.is_finite()) {
        return Err(PolicyError::NonFinite);
    }
    Ok(PolicyMatrix {
        a,
        gamma,
        mode,
        k: decomp.k(),
    })
}

/// Solves `(Sigma_x ⊗ Sigma_r) vec(A) = vec(Sigma_rx') / gamma` directly, with
/// row-major `vec`. Only for small systems; used to cross-check [`cp_policy`].
pub fn kronecker_oracle(m: &MomentEstimates, gamma: f64) -> Result<PolicyMatrix, PolicyError> {
    check_gamma(gamma)?;
    let n = m.n_assets();
    let nm = m.n_signals_total();
    let dim = n * nm;
    if dim > KRONECKER_MAX_DIM {
        return Err(PolicyError::DimensionTooLarge(dim));
    }
    let kron = m.sigma_x.kronecker(&m.sigma_r);
    let rhs_mat = m.sigma_rx.transpose() / gamma;
    let rhs = DVector::from_iterator(
        dim,
        rhs_mat
            .row_iter()
            .flat_map(|r| r.iter().copied().collect::<Vec<_>>()),
    );
    let sol = kron.lu().solve(&rhs).ok_or(PolicyError::Singular)?;
    let a = DMatrix::from_row_slice(nm, n, sol.as_slice());
    Ok(PolicyMatrix {
        a,
        gamma,
        mode: PolicyMode::Approx,
        k: n.min(nm),
    })
}

/// Subtract each row's mean (the cross-sectional average at each date).
pub fn cross_sectional_demean(returns: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = returns.clone();
    for mut row in out.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    out
}

/// Principal portfolios: `A = sum_{i<=k} s_i v_i u_i' / gamma` from the SVD of
/// the unwhitened `N x NM` cross-moment `s_rx`.
pub fn pp_policy(s_rx: &DMatrix<f64>, k: usize, gamma: f64) -> Result<PolicyMatrix, PolicyError> {
    check_gamma(gamma)?;
    let (s, u, v) = sorted_svd(s_rx)?;
    let max = s.len();
    if k == 0 || k > max {
        return Err(CcaError::InvalidK { k, max }.into());
    }
    let mut a = DMatrix::zeros(s_rx.ncols(), s_rx.nrows());
    for i in 0..k {
        a += v.column(i) * u.column(i).transpose() * (s[i] / gamma);
    }
    Ok(PolicyMatrix {
        a,
        gamma,
        mode: PolicyMode::Approx,
        k,
    })
}

/// `w = Sigma_r^{-1} x / gamma`, with the signal standing in for expected returns.
pub fn mvo_policy(
    sigma_r: &DMatrix<f64>,
    x: &DVector<f64>,
    gamma: f64,
    floor_rel: f64,
) -> Result<WeightVector, PolicyError> {
    check_gamma(gamma)?;
    check_len("signal", x.len(), sigma_r.nrows())?;
    let inv = sym_inv(sigma_r, floor_rel)?;
    check_finite_vec(inv * x / gamma)
}

pub fn uni_policy(x: &DVector<f64>) -> WeightVector {
    WeightVector::new(x.clone())
}

/// Regression-based policy `w = Sigma_e^{-1} Sigma_rx Sigma_x^{-1} x / gamma`
/// with residual covariance `Sigma_e = Sigma_r - Sigma_rx Sigma_x^{-1} Sigma_rx'`.
pub fn reg_policy(
    m: &MomentEstimates,
    x: &DVector<f64>,
    gamma: f64,
) -> Result<WeightVector, PolicyError> {
    check_gamma(gamma)?;
    check_len("signal", x.len(), m.n_signals_total())?;
    let inv_x = sym_inv(&m.sigma_x, m.eig_floor_rel)?;
    let beta = &m.sigma_rx * &inv_x;
    let resid = &m.sigma_r - &beta * m.sigma_rx.transpose();
    let resid = (&resid + resid.transpose()) * 0.5;
    let inv_e = sym_inv(&resid, m.eig_floor_rel)?;
    check_finite_vec(inv_e * beta * x / gamma)
}

/// Global minimum variance weights `Sigma_r^{-1} 1 / (1' Sigma_r^{-1} 1)`.
pub fn gmv_weights(sigma_r: &DMatrix<f64>, floor_rel: f64) -> Result<WeightVector, PolicyError> {
    let inv = sym_inv(sigma_r, floor_rel)?;
    let ones = DVector::from_element(sigma_r.nrows(), 1.0);
    let raw = inv * ones;
    let denom = raw.sum();
    if denom == 0.0 || !denom.is_finite() {
        return Err(PolicyError::DivisionDegenerate);
    }
    check_finite_vec(raw / denom)
}

/// Fully-invested policy: a mix of the GMV portfolio and the signal-implied
/// portfolio `h = Sigma_r^{-1} Sigma_rx Sigma_x^{-1} x`, with mixing weight
/// `kappa = 1'h / gamma`. Weights sum to one.
pub fn fully_invested(
    m: &MomentEstimates,
    x: &DVector<f64>,
    gamma: f64,
) -> Result<WeightVector, PolicyError> {
    check_gamma(gamma)?;
    check_len("signal", x.len(), m.n_signals_total())?;
    let inv_r = sym_inv(&m.sigma_r, m.eig_floor_rel)?;
    let inv_x = sym_inv(&m.sigma_x, m.eig_floor_rel)?;
    let h = &inv_r * &m.sigma_rx * inv_x * x;
    let exposure = h.sum();
    if exposure == 0.0 || !exposure.is_finite() {
        return Err(PolicyError::DivisionDegenerate);
    }
    let kappa = exposure / gamma;
    let gmv = gmv_weights(&m.sigma_r, m.eig_floor_rel)?;
    // kappa * h / 1'h simplifies to h / gamma.
    let mut w = gmv.w * (1.0 - kappa) + h / gamma;
    // Put the rounding residual of the budget constraint on the largest position.
    let resid = 1.0 - w.sum();
    let imax = w.iamax();
    w[imax] += resid;
    check_finite_vec(w)
}

/// `w = A' x`.
pub fn weights_from_policy(
    p: &PolicyMatrix,
    x: &DVector<f64>,
) -> Result<WeightVector, PolicyError> {
    check_len("signal", x.len(), p.n_signals_total())?;
    check_finite_vec(p.a.tr_mul(x))
}

/// Scale to unit gross exposure; a zero vector is returned unchanged.
pub fn normalize_gross(w: &WeightVector) -> WeightVector {
    let gross: f64 = w.w.iter().map(|v| v.abs()).sum();
    if gross == 0.0 {
        return w.clone();
    }
    WeightVector {
        w: &w.w / gross,
        date: w.date,
        gross: 1.0,
    }
}

/// Objective without the fourth-moment term: `Tr(A Sigma_rx) - gamma/2 Tr(Sigma_x A Sigma_r A')`.
pub fn approx_objective(a: &DMatrix<f64>, m: &MomentEstimates, gamma: f64) -> f64 {
    let ret = (a * &m.sigma_rx).trace();
    let var = (&m.sigma_x * a * &m.sigma_r * a.transpose()).trace();
    ret - 0.5 * gamma * var
}

/// Full Gaussian objective `Tr(A Sigma_rx) - gamma/2 (Tr(Sigma_x A Sigma_r A') + Tr(Sigma_rx A Sigma_rx A))`.
pub fn full_objective(a: &DMatrix<f64>, m: &MomentEstimates, gamma: f64) -> f64 {
    let cross = (&m.sigma_rx * a * &m.sigma_rx * a).trace();
    approx_objective(a, m, gamma) - 0.5 * gamma * cross
}

/// Expected policy return `Tr(A Sigma_rx)`.
pub fn expected_return(a: &DMatrix<f64>, m: &MomentEstimates) -> f64 {
    (a * &m.sigma_rx).trace()
}

/// Portfolio policies selectable in backtests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Cp,
    Pp,
    Mvo,
    Uni,
    Reg,
    FullyInvested,
}

/// A policy kind together with its truncation and mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    pub mode: PolicyMode,
    pub k: usize,
    pub gamma: f64,
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Cp,
            mode: PolicyMode::Approx,
            k: 2,
            gamma: 1.0,
        }
    }
}

impl PolicySpec {
    /// Parses `cp2`, `cp-full-2`, `pp2`, `mvo`, `uni`, `reg`, `fully-invested`.
    /// A trailing number on `cp`/`pp` sets `k`.
    pub fn parse(s: &str) -> Result<Self, PolicyError> {
        let lower = s.trim().to_ascii_lowercase();
        let unknown = || PolicyError::UnknownPolicy(s.to_string());
        let base = Self::default();
        let simple = |kind| Ok(Self { kind, ..base });
        match lower.as_str() {
            "mvo" => return simple(PolicyKind::Mvo),
            "uni" => return simple(PolicyKind::Uni),
            "reg" => return simple(PolicyKind::Reg),
            "fully-invested" | "fi" => return simple(PolicyKind::FullyInvested),
            _ => {}
        }
        let (kind, rest) = if let Some(r) = lower.strip_prefix("cp") {
            (PolicyKind::Cp, r)
        } else if let Some(r) = lower.strip_prefix("pp") {
            (PolicyKind::Pp, r)
        } else {
            return Err(unknown());
        };
        let (mode, digits) = match rest.strip_prefix("-full-") {
            Some(d) if kind == PolicyKind::Cp => (PolicyMode::Full, d),
            Some(_) => return Err(unknown()),
            None => (PolicyMode::Approx, rest.strip_prefix('-').unwrap_or(rest)),
        };
        let k = if digits.is_empty() {
            base.k
        } else {
            digits.parse::<usize>().map_err(|_| unknown())?
        };
        if k == 0 {
            return Err(unknown());
        }
        Ok(Self {
            kind,
            mode,
            k,
            ..base
        })
    }

    /// Display label, e.g. `CP2`, `CP2 (Full)`, `PP2`, `MVO`.
    pub fn label(&self) -> String {
        match self.kind {
            PolicyKind::Cp => match self.mode {
                PolicyMode::Approx => format!("CP{}", self.k),
                PolicyMode::Full => format!("CP{} (Full)", self.k),
            },
            PolicyKind::Pp => format!("PP{}", self.k),
            PolicyKind::Mvo => "MVO".into(),
            PolicyKind::Uni => "UNI".into(),
            PolicyKind::Reg => "REG".into(),
            PolicyKind::FullyInvested => "FI".into(),
        }
    }

    /// Whether weights are rescaled to unit gross exposure.
    pub fn gross_normalized(&self) -> bool {
        self.kind != PolicyKind::FullyInvested
    }
}

impl FromStr for PolicySpec {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}
