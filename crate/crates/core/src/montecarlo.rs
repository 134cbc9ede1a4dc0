//! Synthetic jointly Gaussian markets and Monte Carlo diagnostics of the
//! canonical portfolio estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cca::{cca_decompose, replica_rng};
use crate::moments::{
    estimate_moments, sym_inv, sym_inv_sqrt, sym_sqrt, DemeanFlags, MomentConfig, MomentError,
    MomentEstimates, ShrinkageConfig, ShrinkageMode,
};
use crate::policy::{cp_policy, PolicyMode};
use crate::Error;

/// Draws per parallel work unit; each unit has its own random stream.
const CHUNK: usize = 8192;

#[derive(Debug, Error, PartialEq)]
pub enum MonteCarloError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("joint covariance is not positive definite")]
    NotPositiveDefinite,
    #[error(transparent)]
    Moment(#[from] MomentError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMarketSpec {
    pub n: usize,
    /// Signals per asset.
    pub m: usize,
    pub t: usize,
    /// Canonical correlations, each in `[0, 1)`; missing ones are zero.
    pub target_s: Vec<f64>,
    pub mu_r: Option<Vec<f64>>,
    pub mu_x: Option<Vec<f64>>,
    /// Marginal covariances; identity when absent.
    pub sigma_r: Option<Vec<Vec<f64>>>,
    pub sigma_x: Option<Vec<Vec<f64>>>,
    pub seed: u64,
}

impl Default for SyntheticMarketSpec {
    fn default() -> Self {
        Self {
            n: 2,
            m: 1,
            t: 1000,
            target_s: vec![0.5],
            mu_r: None,
            mu_x: None,
            sigma_r: None,
            sigma_x: None,
            seed: 0,
        }
    }
}

fn invalid(msg: impl Into<String>) -> MonteCarloError {
    MonteCarloError::InvalidSpec(msg.into())
}

fn square(rows: &[Vec<f64>], dim: usize, name: &str) -> Result<DMatrix<f64>, MonteCarloError> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(invalid(format!("{name} must be {dim}x{dim}")));
    }
    Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
}

fn vector(v: &Option<Vec<f64>>, dim: usize, name: &str) -> Result<DVector<f64>, MonteCarloError> {
    match v {
        None => Ok(DVector::zeros(dim)),
        Some(v) if v.len() == dim => Ok(DVector::from_column_slice(v)),
        Some(v) => Err(invalid(format!(
            "{name} has length {}, expected {dim}",
            v.len()
        ))),
    }
}

impl SyntheticMarketSpec {
    pub fn n_signals_total(&self) -> usize {
        self.n * self.m
    }

    pub fn validate(&self) -> Result<(), MonteCarloError> {
        if self.n == 0 || self.m == 0 {
            return Err(invalid("n and m must be positive"));
        }
        let k = self.n.min(self.n_signals_total());
        if self.target_s.len() > k {
            return Err(invalid(format!(
                "{} canonical correlations but at most {k}",
                self.target_s.len()
            )));
        }
        if let Some(s) = self.target_s.iter().find(|s| !(0.0..1.0).contains(*s)) {
            return Err(invalid(format!("canonical correlation {s} outside [0, 1)")));
        }
        Ok(())
    }
}

/// Random `rows x cols` matrix with orthonormal columns (Haar distributed).
fn random_orthonormal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// A jointly Gaussian `(r, x)` distribution that can be sampled.
#[derive(Debug, Clone)]
pub struct GaussianMarket {
    /// True covariances.
    pub moments: MomentEstimates,
    pub mu_r: DVector<f64>,
    pub mu_x: DVector<f64>,
    chol: DMatrix<f64>,
}

impl GaussianMarket {
    pub fn new(
        moments: MomentEstimates,
        mu_r: DVector<f64>,
        mu_x: DVector<f64>,
    ) -> Result<Self, MonteCarloError> {
        let n = moments.n_assets();
        let nm = moments.n_signals_total();
        if mu_r.len() != n || mu_x.len() != nm {
            return Err(invalid("mean vector lengths do not match the covariances"));
        }
        let d = n + nm;
        let mut joint = DMatrix::zeros(d, d);
        joint.view_mut((0, 0), (n, n)).copy_from(&moments.sigma_r);
        joint.view_mut((n, n), (nm, nm)).copy_from(&moments.sigma_x);
        joint.view_mut((0, n), (n, nm)).copy_from(&moments.sigma_rx);
        joint
            .view_mut((n, 0), (nm, n))
            .copy_from(&moments.sigma_rx.transpose());
        let chol = Cholesky::<f64, Dyn>::new(joint).ok_or(MonteCarloError::NotPositiveDefinite)?;
        Ok(Self {
            moments,
            mu_r,
            mu_x,
            chol: chol.l(),
        })
    }

    pub fn n_assets(&self) -> usize {
        self.mu_r.len()
    }

    pub fn n_signals_total(&self) -> usize {
        self.mu_x.len()
    }

    /// One joint draw `(r, x)`.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> (DVector<f64>, DVector<f64>) {
        let d = self.chol.nrows();
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = &self.chol * z;
        let n = self.n_assets();
        let r = y.rows(0, n) + &self.mu_r;
        let x = y.rows(n, d - n) + &self.mu_x;
        (r, x)
    }

    /// `t` draws as `(returns t x N, signals t x NM)`.
    pub fn sample(&self, rng: &mut ChaCha8Rng, t: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut r = DMatrix::zeros(t, self.n_assets());
        let mut x = DMatrix::zeros(t, self.n_signals_total());
        for i in 0..t {
            let (ri, xi) = self.draw(rng);
            r.row_mut(i).copy_from(&ri.transpose());
            x.row_mut(i).copy_from(&xi.transpose());
        }
        (r, x)
    }
}

/// Build the market described by `spec`: whitened cross-covariance
/// `U0 diag(s) V0'` with random orthonormal `U0`, `V0`, mapped to the requested
/// marginals by their symmetric square roots.
pub fn build_market(spec: &SyntheticMarketSpec) -> Result<GaussianMarket, MonteCarloError> {
    spec.validate()?;
    let n = spec.n;
    let nm = spec.n_signals_total();
    let k = spec.target_s.len();
    let mut rng = replica_rng(spec.seed, u64::MAX);
    let u0 = random_orthonormal(&mut rng, n, k);
    let v0 = random_orthonormal(&mut rng, nm, k);
    let s = DVector::from_column_slice(&spec.target_s);
    let white = &u0 * DMatrix::from_diagonal(&s) * v0.transpose();
    let sigma_r = match &spec.sigma_r {
        Some(rows) => square(rows, n, "sigma_r")?,
        None => DMatrix::identity(n, n),
    };
    let sigma_x = match &spec.sigma_x {
        Some(rows) => square(rows, nm, "sigma_x")?,
        None => DMatrix::identity(nm, nm),
    };
    let floor = crate::moments::DEFAULT_EIG_FLOOR_REL;
    let sigma_rx = sym_sqrt(&sigma_r, floor)? * white * sym_sqrt(&sigma_x, floor)?;
    let moments = MomentEstimates::population(sigma_r, sigma_x, sigma_rx)?;
    GaussianMarket::new(
        moments,
        vector(&spec.mu_r, n, "mu_r")?,
        vector(&spec.mu_x, nm, "mu_x")?,
    )
}

/// `spec.t` draws from the market of `spec` together with its true moments.
pub fn gaussian_market(
    spec: &SyntheticMarketSpec,
) -> Result<(DMatrix<f64>, DMatrix<f64>, MomentEstimates), MonteCarloError> {
    let market = build_market(spec)?;
    let mut rng = replica_rng(spec.seed, 0);
    let (r, x) = market.sample(&mut rng, spec.t);
    Ok((r, x, market.moments))
}

/// Population return statistics of the canonical portfolios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalMoments {
    /// `s_i^2`.
    pub expected: Vec<f64>,
    /// `s_i^2 (1 + s_i^2)`.
    pub variance: Vec<f64>,
    /// `s_i / sqrt(1 + s_i^2)`.
    pub sharpe: Vec<f64>,
    /// `sum s_i^2 / gamma`.
    pub total_expected: f64,
    /// `sqrt(sum s_i^2)`.
    pub total_sharpe: f64,
}

pub fn canonical_moments(s: &[f64], gamma: f64) -> CanonicalMoments {
    let sum2: f64 = s.iter().map(|v| v * v).sum();
    CanonicalMoments {
        expected: s.iter().map(|v| v * v).collect(),
        variance: s.iter().map(|v| v * v * (1.0 + v * v)).collect(),
        sharpe: s.iter().map(|v| v / (1.0 + v * v).sqrt()).collect(),
        total_expected: sum2 / gamma,
        total_sharpe: sum2.sqrt(),
    }
}

/// Streaming power sums for mean, variance and their standard errors.
#[derive(Debug, Clone, Copy, Default)]
struct Moments4 {
    n: f64,
    s: [f64; 4],
}

impl Moments4 {
    fn push(&mut self, v: f64) {
        self.n += 1.0;
        let mut p = 1.0;
        for k in 0..4 {
            p *= v;
            self.s[k] += p;
        }
    }

    fn merge(mut self, other: Self) -> Self {
        self.n += other.n;
        for k in 0..4 {
            self.s[k] += other.s[k];
        }
        self
    }

    fn estimate(&self) -> McEstimate {
        let n = self.n;
        let m1 = self.s[0] / n;
        let e2 = self.s[1] / n;
        let e3 = self.s[2] / n;
        let e4 = self.s[3] / n;
        let var = e2 - m1 * m1;
        let c4 = e4 - 4.0 * m1 * e3 + 6.0 * m1 * m1 * e2 - 3.0 * m1.powi(4);
        McEstimate {
            mean: m1,
            se_mean: (var / n).sqrt(),
            var,
            se_var: ((c4 - var * var).max(0.0) / n).sqrt(),
            n: n as usize,
        }
    }
}

/// Monte Carlo mean and variance of a scalar with standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub se_mean: f64,
    pub var: f64,
    pub se_var: f64,
    pub n: usize,
}

impl McEstimate {
    /// `|mean - target| / se_mean`.
    pub fn mean_z(&self, target: f64) -> f64 {
        (self.mean - target).abs() / self.se_mean
    }

    pub fn var_z(&self, target: f64) -> f64 {
        (self.var - target).abs() / self.se_var
    }
}

/// Accumulate `f(draw)` (a vector of statistics) over `n_draws` draws in
/// parallel, deterministically for a given seed.
fn simulate<F>(
    market: &GaussianMarket,
    n_draws: usize,
    seed: u64,
    width: usize,
    f: F,
) -> Vec<McEstimate>
where
    F: Fn(&DVector<f64>, &DVector<f64>, &mut [f64]) + Sync,
{
    let chunks = n_draws.div_ceil(CHUNK);
    let acc = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = replica_rng(seed, c as u64);
            let mut acc = vec![Moments4::default(); width];
            let mut out = vec![0.0; width];
            let count = CHUNK.min(n_draws - c * CHUNK);
            for _ in 0..count {
                let (r, x) = market.draw(&mut rng);
                f(&r, &x, &mut out);
                for (a, v) in acc.iter_mut().zip(&out) {
                    a.push(*v);
                }
            }
            acc
        })
        .reduce(
            || vec![Moments4::default(); width],
            |a, b| a.into_iter().zip(b).map(|(x, y)| x.merge(y)).collect(),
        );
    acc.iter().map(Moments4::estimate).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop4Report {
    pub s: Vec<f64>,
    pub gamma: f64,
    /// Per canonical pair, `pi_i = s_i (v_i' x~)(u_i' r~)` on whitened, centered draws.
    pub canonical: Vec<McEstimate>,
    pub predicted: CanonicalMoments,
    /// Return of the approximate policy `x' A r` on raw draws, `A` built from
    /// the second-moment matrix `mu_r mu_x' + Sigma_rx`.
    pub portfolio: McEstimate,
    /// `(1/gamma) [ (mu_r' Sr^-1 mu_r)(mu_x' Sx^-1 mu_x) + sum s_i^2 + 2 mu_r' Sr^-1 Sigma_rx Sx^-1 mu_x ]`.
    pub predicted_portfolio_mean: f64,
    /// The same without the cross term `2 mu_r' Sr^-1 Sigma_rx Sx^-1 mu_x`.
    pub static_plus_dynamic: f64,
    /// `sum s_i^2 (1 + s_i^2) / gamma^2`, valid for zero means.
    pub predicted_portfolio_var: f64,
}

/// Monte Carlo check of canonical portfolio moments and of the mean policy
/// return with nonzero means.
pub fn verify_prop4(
    spec: &SyntheticMarketSpec,
    n_draws: usize,
    gamma: f64,
) -> Result<Prop4Report, Error> {
    if n_draws < 2 {
        return Err(invalid("need at least 2 draws").into());
    }
    let market = build_market(spec)?;
    let m = &market.moments;
    let d = cca_decompose(m)?;
    let k = spec.target_s.len();
    let floor = m.eig_floor_rel;
    let wr = sym_inv_sqrt(&m.sigma_r, floor)?;
    let wx = sym_inv_sqrt(&m.sigma_x, floor)?;
    // Directions in raw coordinates: u_i' r~ = (Wr u_i)' (r - mu_r).
    let a_r = (&wr * &d.u).columns(0, k).into_owned();
    let a_x = (&wx * &d.v).columns(0, k).into_owned();
    let s: Vec<f64> = d.s.iter().take(k).copied().collect();

    let inv_r = sym_inv(&m.sigma_r, floor)?;
    let inv_x = sym_inv(&m.sigma_x, floor)?;
    let second = &m.sigma_rx + &market.mu_r * market.mu_x.transpose();
    let a = &inv_x * second.transpose() * &inv_r / gamma;

    let (mu_r, mu_x) = (market.mu_r.clone(), market.mu_x.clone());
    let est = simulate(&market, n_draws, spec.seed, k + 1, |r, x, out| {
        let rc = r - &mu_r;
        let xc = x - &mu_x;
        for i in 0..k {
            out[i] = s[i] * a_x.column(i).dot(&xc) * a_r.column(i).dot(&rc);
        }
        out[k] = x.dot(&(&a * r));
    });

    let sum2: f64 = s.iter().map(|v| v * v).sum();
    let static_term =
        market.mu_r.dot(&(&inv_r * &market.mu_r)) * market.mu_x.dot(&(&inv_x * &market.mu_x));
    let cross = 2.0
        * market
            .mu_r
            .dot(&(&inv_r * &m.sigma_rx * &inv_x * &market.mu_x));
    Ok(Prop4Report {
        predicted: canonical_moments(&s, gamma),
        s: s.clone(),
        gamma,
        canonical: est[..k].to_vec(),
        portfolio: est[k],
        predicted_portfolio_mean: (static_term + sum2 + cross) / gamma,
        static_plus_dynamic: (static_term + sum2) / gamma,
        predicted_portfolio_var: s.iter().map(|v| v * v * (1.0 + v * v)).sum::<f64>()
            / (gamma * gamma),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsserlisCheck {
    pub estimate: McEstimate,
    /// `Tr(Sx A Sr A') + Tr(Srx A Srx A)`.
    pub predicted_var: f64,
}

/// Monte Carlo variance of `x' A r` under zero-mean draws from `moments`.
pub fn isserlis_check(
    moments: &MomentEstimates,
    a: &DMatrix<f64>,
    n_draws: usize,
    seed: u64,
) -> Result<IsserlisCheck, MonteCarloError> {
    let n = moments.n_assets();
    let nm = moments.n_signals_total();
    if a.shape() != (nm, n) {
        return Err(invalid(format!(
            "A is {:?}, expected ({nm}, {n})",
            a.shape()
        )));
    }
    let market = GaussianMarket::new(moments.clone(), DVector::zeros(n), DVector::zeros(nm))?;
    let est = simulate(&market, n_draws, seed, 1, |r, x, out| {
        out[0] = x.dot(&(a * r))
    });
    let predicted_var = (&moments.sigma_x * a * &moments.sigma_r * a.transpose()).trace()
        + (&moments.sigma_rx * a * &moments.sigma_rx * a).trace();
    Ok(IsserlisCheck {
        estimate: est[0],
        predicted_var,
    })
}

fn unshrunk() -> MomentConfig {
    MomentConfig {
        shrinkage: ShrinkageConfig {
            mode_r: ShrinkageMode::Fixed(0.0),
            mode_x: ShrinkageMode::Fixed(0.0),
            ..ShrinkageConfig::default()
        },
        demean: DemeanFlags::default(),
        ..MomentConfig::default()
    }
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Sample canonical correlations on independent data for one `(N, q)` cell,
/// `q` being the total signal dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WachterCell {
    pub n_ratio: f64,
    pub q_ratio: f64,
    pub n: usize,
    pub q: usize,
    pub t: usize,
    pub reps: usize,
    /// Mean over replicas of the average sample canonical correlation.
    pub mean_s: f64,
    pub se_mean_s: f64,
    /// Mean over replicas of the largest sample canonical correlation.
    pub mean_max_s: f64,
    pub se_max_s: f64,
    /// 5%, 50% and 95% quantiles of all pooled sample canonical correlations.
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

/// Upward bias of sample canonical correlations on independent Gaussian data
/// as the dimension-to-sample ratios grow.
pub fn wachter_bias_experiment(
    ratios: &[(f64, f64)],
    t: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<WachterCell>, Error> {
    if reps == 0 {
        return Err(invalid("reps must be at least 1").into());
    }
    let cfg = unshrunk();
    let mut cells = Vec::with_capacity(ratios.len());
    for (cell, &(nr, qr)) in ratios.iter().enumerate() {
        let n = (nr * t as f64).round() as usize;
        let q = (qr * t as f64).round() as usize;
        if n == 0 || q == 0 || n.max(q) >= t {
            return Err(invalid(format!(
                "ratios ({nr}, {qr}) at T = {t} give N = {n}, q = {q}"
            ))
            .into());
        }
        let cell_seed = seed.wrapping_add((cell as u64) << 32);
        let per_rep: Vec<Vec<f64>> = (0..reps)
            .into_par_iter()
            .map(|rep| {
                let mut rng = replica_rng(cell_seed, rep as u64);
                let r = DMatrix::from_fn(t, n, |_, _| rng.sample::<f64, _>(StandardNormal));
                let x = DMatrix::from_fn(t, q, |_, _| rng.sample::<f64, _>(StandardNormal));
                let m = estimate_moments(&r, &x, &cfg)?;
                Ok(cca_decompose(&m)?.s.iter().copied().collect())
            })
            .collect::<Result<_, Error>>()?;
        let means: Vec<f64> = per_rep
            .iter()
            .map(|s| s.iter().sum::<f64>() / s.len() as f64)
            .collect();
        let maxes: Vec<f64> = per_rep.iter().map(|s| s[0]).collect();
        let mut pooled: Vec<f64> = per_rep.into_iter().flatten().collect();
        pooled.sort_by(f64::total_cmp);
        let (mean_s, se_mean_s) = mean_se(&means);
        let (mean_max_s, se_max_s) = mean_se(&maxes);
        cells.push(WachterCell {
            n_ratio: nr,
            q_ratio: qr,
            n,
            q,
            t,
            reps,
            mean_s,
            se_mean_s,
            mean_max_s,
            se_max_s,
            q05: quantile(&pooled, 0.05),
            q50: quantile(&pooled, 0.5),
            q95: quantile(&pooled, 0.95),
        });
    }
    Ok(cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InsampleBias {
    /// Mean of `sum_i s^_i^2`.
    pub mean_in: f64,
    pub se_in: f64,
    /// Mean of `sum_i s^_i s_i°` with `s_i° = q^_r,i' Sigma_rx q^_x,i`.
    pub mean_out: f64,
    pub se_out: f64,
    /// Paired difference `mean_in - mean_out` and its standard error.
    pub mean_diff: f64,
    pub se_diff: f64,
    pub reps: usize,
}

/// In-sample versus out-of-sample canonical returns of sample-estimated
/// canonical portfolios.
pub fn insample_bias_experiment(
    spec: &SyntheticMarketSpec,
    reps: usize,
) -> Result<InsampleBias, Error> {
    if reps < 2 {
        return Err(invalid("reps must be at least 2").into());
    }
    let market = build_market(spec)?;
    let cfg = unshrunk();
    let pairs: Vec<(f64, f64)> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = replica_rng(spec.seed, rep as u64);
            let (r, x) = market.sample(&mut rng, spec.t);
            let est = estimate_moments(&r, &x, &cfg)?;
            let d = cca_decompose(&est)?;
            let inside: f64 = d.s.iter().map(|v| v * v).sum();
            let outside: f64 = (0..d.k())
                .map(|i| {
                    let s_out = d
                        .q_r
                        .column(i)
                        .dot(&(&market.moments.sigma_rx * d.q_x.column(i)));
                    d.s[i] * s_out
                })
                .sum();
            Ok((inside, outside))
        })
        .collect::<Result<_, Error>>()?;
    let ins: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let outs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let diffs: Vec<f64> = pairs.iter().map(|p| p.0 - p.1).collect();
    let (mean_in, se_in) = mean_se(&ins);
    let (mean_out, se_out) = mean_se(&outs);
    let (mean_diff, se_diff) = mean_se(&diffs);
    Ok(InsampleBias {
        mean_in,
        se_in,
        mean_out,
        se_out,
        mean_diff,
        se_diff,
        reps,
    })
}

/// Expected return `Tr(A Sigma_rx)` of the approximate CP policy on known moments.
pub fn policy_expected_return(moments: &MomentEstimates, gamma: f64) -> Result<f64, Error> {
    let d = cca_decompose(moments)?;
    let p = cp_policy(&d, gamma, PolicyMode::Approx)?;
    Ok((p.a * &moments.sigma_rx).trace())
}
