//! Sample moments of (next-period return, signal) pairs, linear shrinkage
//! toward a scaled identity, and symmetric matrix square roots.
//!
//! Throughout, row `t` of a returns block is paired with row `t` of the
//! signals block: the caller aligns `r_{t+1}` with `x_t` before estimation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default relative eigenvalue floor applied before taking roots or inverses.
pub const DEFAULT_EIG_FLOOR_REL: f64 = 1e-12;

/// Absolute symmetry tolerance, scaled by the largest entry.
const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum MomentError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix has no positive eigenvalue after flooring")]
    SingularAfterFloor,
    #[error("shrinkage intensity {0} outside [0, 1]")]
    InvalidShrinkage(f64),
}

/// How a shrinkage intensity is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ShrinkageMode {
    /// Ledoit-Wolf (2004) asymptotic intensity for the scaled-identity target.
    Auto,
    /// Fixed intensity in `[0, 1]`.
    Fixed(f64),
}

impl ShrinkageMode {
    fn validate(self) -> Result<(), MomentError> {
        match self {
            ShrinkageMode::Fixed(d) if !(0.0..=1.0).contains(&d) || d.is_nan() => {
                Err(MomentError::InvalidShrinkage(d))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageConfig {
    pub mode_r: ShrinkageMode,
    pub mode_x: ShrinkageMode,
    pub eig_floor_rel: f64,
}

impl Default for ShrinkageConfig {
    fn default() -> Self {
        Self {
            mode_r: ShrinkageMode::Auto,
            mode_x: ShrinkageMode::Fixed(0.9),
            eig_floor_rel: DEFAULT_EIG_FLOOR_REL,
        }
    }
}

/// Which inputs are centered (time-series demeaned) before forming second moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemeanFlags {
    pub returns: bool,
    pub signals: bool,
}

impl Default for DemeanFlags {
    fn default() -> Self {
        Self {
            returns: true,
            signals: true,
        }
    }
}

/// Cross-moment fed to the decomposition: the demeaned cross-covariance or the
/// raw second moment `T^{-1} sum r_{t+1} x_t'`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrossMoment {
    Centered,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentConfig {
    pub shrinkage: ShrinkageConfig,
    pub demean: DemeanFlags,
    pub cross_moment: CrossMoment,
}

impl Default for MomentConfig {
    fn default() -> Self {
        Self {
            shrinkage: ShrinkageConfig::default(),
            demean: DemeanFlags::default(),
            cross_moment: CrossMoment::Centered,
        }
    }
}

/// Joint moments of returns (`N`) and stacked signals (`N*M`).
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimates {
    pub sigma_r: DMatrix<f64>,
    pub sigma_x: DMatrix<f64>,
    /// `N x NM` cross-moment between next-period returns and signals.
    pub sigma_rx: DMatrix<f64>,
    pub mu_r: DVector<f64>,
    pub mu_x: DVector<f64>,
    pub delta_r: f64,
    pub delta_x: f64,
    pub demean: DemeanFlags,
    pub eig_floor_rel: f64,
    /// Number of paired observations the estimates came from (0 for population moments).
    pub n_obs: usize,
}

impl MomentEstimates {
    /// Population moments with no estimation metadata.
    pub fn population(
        sigma_r: DMatrix<f64>,
        sigma_x: DMatrix<f64>,
        sigma_rx: DMatrix<f64>,
    ) -> Result<Self, MomentError> {
        let n = sigma_r.nrows();
        let nm = sigma_x.nrows();
        if !sigma_r.is_square() || !sigma_x.is_square() || sigma_rx.shape() != (n, nm) {
            return Err(MomentError::ShapeMismatch(format!(
                "sigma_r {:?}, sigma_x {:?}, sigma_rx {:?}",
                sigma_r.shape(),
                sigma_x.shape(),
                sigma_rx.shape()
            )));
        }
        check_symmetric(&sigma_r)?;
        check_symmetric(&sigma_x)?;
        Ok(Self {
            sigma_r,
            sigma_x,
            sigma_rx,
            mu_r: DVector::zeros(n),
            mu_x: DVector::zeros(nm),
            delta_r: 0.0,
            delta_x: 0.0,
            demean: DemeanFlags {
                returns: true,
                signals: true,
            },
            eig_floor_rel: DEFAULT_EIG_FLOOR_REL,
            n_obs: 0,
        })
    }

    pub fn n_assets(&self) -> usize {
        self.sigma_r.nrows()
    }

    pub fn n_signals_total(&self) -> usize {
        self.sigma_x.nrows()
    }
}

fn column_means(data: &DMatrix<f64>) -> DVector<f64> {
    let t = data.nrows() as f64;
    DVector::from_iterator(data.ncols(), data.column_iter().map(|c| c.sum() / t))
}

fn centered(data: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = data.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    out
}

/// Observations as used for a second moment: centered when `demean` is set.
pub fn observations(data: &DMatrix<f64>, demean: bool) -> DMatrix<f64> {
    if demean {
        centered(data, &column_means(data))
    } else {
        data.clone()
    }
}

/// Unshrunk sample moments `S_r`, `S_x`, `S_rx` (all normalized by `T`).
///
/// Means are always stored. `S_rx` is centered whenever either input is
/// demeaned, since `T^{-1} sum (r - mu_r) x' = T^{-1} sum (r - mu_r)(x - mu_x)'`.
pub fn sample_moments(
    returns: &DMatrix<f64>,
    signals: &DMatrix<f64>,
    demean: DemeanFlags,
) -> Result<MomentEstimates, MomentError> {
    let t = returns.nrows();
    if t != signals.nrows() {
        return Err(MomentError::ShapeMismatch(format!(
            "returns have {} rows, signals {}",
            t,
            signals.nrows()
        )));
    }
    if t < 2 {
        return Err(MomentError::ShapeMismatch(format!(
            "need at least 2 observations, got {t}"
        )));
    }
    let tf = t as f64;
    let mu_r = column_means(returns);
    let mu_x = column_means(signals);
    let r_obs = if demean.returns {
        centered(returns, &mu_r)
    } else {
        returns.clone()
    };
    let x_obs = if demean.signals {
        centered(signals, &mu_x)
    } else {
        signals.clone()
    };
    let sigma_r = symmetrize(&(r_obs.transpose() * &r_obs / tf));
    let sigma_x = symmetrize(&(x_obs.transpose() * &x_obs / tf));
    let sigma_rx = if demean.returns || demean.signals {
        centered(returns, &mu_r).transpose() * centered(signals, &mu_x) / tf
    } else {
        returns.transpose() * signals / tf
    };
    Ok(MomentEstimates {
        sigma_r,
        sigma_x,
        sigma_rx,
        mu_r,
        mu_x,
        delta_r: 0.0,
        delta_x: 0.0,
        demean,
        eig_floor_rel: DEFAULT_EIG_FLOOR_REL,
        n_obs: t,
    })
}

/// Linear shrinkage of `sample` toward `mu I`, `mu = Tr(sample)/N`.
///
/// `observations` are the `T x N` rows `z_t` with `sample = T^{-1} sum z_t z_t'`;
/// they are only read in [`ShrinkageMode::Auto`].
pub fn lw_shrink(
    sample: &DMatrix<f64>,
    observations: &DMatrix<f64>,
    mode: ShrinkageMode,
) -> Result<(DMatrix<f64>, f64), MomentError> {
    check_symmetric(sample)?;
    mode.validate()?;
    let n = sample.nrows();
    let mu = sample.trace() / n as f64;
    let target = DMatrix::<f64>::identity(n, n) * mu;
    let delta = match mode {
        ShrinkageMode::Fixed(d) => d,
        ShrinkageMode::Auto => {
            if observations.ncols() != n {
                return Err(MomentError::ShapeMismatch(format!(
                    "observations have {} columns, sample is {n}x{n}",
                    observations.ncols()
                )));
            }
            ledoit_wolf_intensity(sample, observations, mu)
        }
    };
    let shrunk = sample * (1.0 - delta) + target * delta;
    Ok((symmetrize(&shrunk), delta))
}

fn ledoit_wolf_intensity(sample: &DMatrix<f64>, obs: &DMatrix<f64>, mu: f64) -> f64 {
    let n = sample.nrows();
    let t = obs.nrows();
    let mut d2 = 0.0;
    for j in 0..n {
        for i in 0..n {
            let target = if i == j { mu } else { 0.0 };
            d2 += (sample[(i, j)] - target).powi(2);
        }
    }
    if d2 <= 0.0 || t == 0 {
        return 0.0;
    }
    // ||z z' - S||_F^2 = ||z||^4 - 2 z'Sz + ||S||_F^2
    let s_norm2 = sample.norm_squared();
    let mut b_bar2 = 0.0;
    for row in obs.row_iter() {
        let z = row.transpose();
        let zz = z.norm_squared();
        let zsz = (sample * &z).dot(&z);
        b_bar2 += zz * zz - 2.0 * zsz + s_norm2;
    }
    b_bar2 /= (t * t) as f64;
    let b2 = b_bar2.min(d2);
    (b2 / d2).clamp(0.0, 1.0)
}

/// Sample moments followed by shrinkage of both marginal covariances and the
/// cross-moment choice from `cfg`. The cross-moment itself is never shrunk.
pub fn estimate_moments(
    returns: &DMatrix<f64>,
    signals: &DMatrix<f64>,
    cfg: &MomentConfig,
) -> Result<MomentEstimates, MomentError> {
    let mut m = sample_moments(returns, signals, cfg.demean)?;
    let (sigma_r, delta_r) = lw_shrink(
        &m.sigma_r,
        &observations(returns, cfg.demean.returns),
        cfg.shrinkage.mode_r,
    )?;
    let (sigma_x, delta_x) = lw_shrink(
        &m.sigma_x,
        &observations(signals, cfg.demean.signals),
        cfg.shrinkage.mode_x,
    )?;
    m.sigma_r = sigma_r;
    m.sigma_x = sigma_x;
    m.delta_r = delta_r;
    m.delta_x = delta_x;
    m.eig_floor_rel = cfg.shrinkage.eig_floor_rel;
    match cfg.cross_moment {
        CrossMoment::Centered => {
            if !(cfg.demean.returns || cfg.demean.signals) {
                m.sigma_rx -= &m.mu_r * m.mu_x.transpose();
            }
        }
        CrossMoment::Raw => {
            if cfg.demean.returns || cfg.demean.signals {
                m.sigma_rx += &m.mu_r * m.mu_x.transpose();
            }
        }
    }
    Ok(m)
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn check_symmetric(m: &DMatrix<f64>) -> Result<(), MomentError> {
    if !m.is_square() {
        return Err(MomentError::ShapeMismatch(format!(
            "expected a square matrix, got {:?}",
            m.shape()
        )));
    }
    let scale = m.amax().max(1.0);
    let mut worst = 0.0_f64;
    for j in 0..m.ncols() {
        for i in 0..j {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if worst > SYMMETRY_TOL * scale || worst.is_nan() {
        return Err(MomentError::NotSymmetric(worst));
    }
    Ok(())
}

/// Eigendecomposition with eigenvalues floored at `floor_rel * lambda_max`.
fn floored_eigen(
    m: &DMatrix<f64>,
    floor_rel: f64,
) -> Result<(DVector<f64>, DMatrix<f64>), MomentError> {
    check_symmetric(m)?;
    let eig = SymmetricEigen::new(symmetrize(m));
    let lambda_max = eig.eigenvalues.max();
    if lambda_max.is_nan() || lambda_max <= 0.0 {
        return Err(MomentError::SingularAfterFloor);
    }
    let floor = floor_rel * lambda_max;
    let values = eig.eigenvalues.map(|l| l.max(floor));
    Ok((values, eig.eigenvectors))
}

fn spectral_map(
    m: &DMatrix<f64>,
    floor_rel: f64,
    f: impl Fn(f64) -> f64,
) -> Result<DMatrix<f64>, MomentError> {
    let (values, vectors) = floored_eigen(m, floor_rel)?;
    let mut scaled = vectors.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= f(values[j]);
    }
    Ok(symmetrize(&(scaled * vectors.transpose())))
}

/// `Sigma^{1/2}` from the eigendecomposition with floored eigenvalues.
pub fn sym_sqrt(m: &DMatrix<f64>, floor_rel: f64) -> Result<DMatrix<f64>, MomentError> {
    spectral_map(m, floor_rel, f64::sqrt)
}

/// `Sigma^{-1/2}` from the eigendecomposition with floored eigenvalues.
pub fn sym_inv_sqrt(m: &DMatrix<f64>, floor_rel: f64) -> Result<DMatrix<f64>, MomentError> {
    spectral_map(m, floor_rel, |l| 1.0 / l.sqrt())
}

/// `Sigma^{-1}` from the eigendecomposition with floored eigenvalues.
pub fn sym_inv(m: &DMatrix<f64>, floor_rel: f64) -> Result<DMatrix<f64>, MomentError> {
    spectral_map(m, floor_rel, |l| 1.0 / l)
}
