//! Performance, factor attribution and weight statistics for backtest output.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backtest::BacktestResult;
use crate::data::ReturnPanel;

/// Smallest sample for the six-factor regression with intercept.
pub const MIN_REGRESSION_OBS: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("return series has zero variance")]
    ZeroVariance,
    #[error("regressors are rank deficient")]
    RankDeficientRegressors,
    #[error("need at least {need} observations, got {got}")]
    TooFewObservations { need: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("static plus dynamic return is zero")]
    DivisionDegenerate,
    #[error("no factor data between {0} and {1}")]
    MissingFactorData(NaiveDate, NaiveDate),
}

/// Periods per year for a holding period of `horizon_days` trading days.
pub fn periods_per_year(horizon_days: usize) -> usize {
    (252 / horizon_days.max(1)).max(1)
}

/// Annualized statistics in percent (means, volatilities) or plain units
/// (ratios, betas, t-statistics).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceReport {
    pub mean_ann: f64,
    pub sd_ann: f64,
    pub sharpe_ann: f64,
    pub sharpe_t: f64,
    pub alpha_ann: Option<f64>,
    pub beta_uni: Option<f64>,
    pub idio_vol_ann: Option<f64>,
    pub ir_ann: Option<f64>,
    pub ir_t: Option<f64>,
    pub periods_per_year: usize,
    pub n_periods: usize,
}

fn mean_sd(x: &DVector<f64>) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.mean();
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Lo (2002) iid t-statistic of a per-period Sharpe ratio.
pub fn lo_tstat(sharpe_per_period: f64, t: usize) -> f64 {
    let se = ((1.0 + 0.5 * sharpe_per_period * sharpe_per_period) / t as f64).sqrt();
    sharpe_per_period / se
}

/// OLS with intercept. Returns `(coefficients [intercept, slopes...], residuals)`.
pub fn ols(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
) -> Result<(DVector<f64>, DVector<f64>), AnalyticsError> {
    if x.nrows() != y.len() {
        return Err(AnalyticsError::ShapeMismatch(format!(
            "{} observations, {} regressor rows",
            y.len(),
            x.nrows()
        )));
    }
    let design = x.clone().insert_column(0, 1.0);
    if design.nrows() < design.ncols() {
        return Err(AnalyticsError::RankDeficientRegressors);
    }
    let gram = design.transpose() * &design;
    let eig = SymmetricEigen::new((&gram + gram.transpose()) * 0.5).eigenvalues;
    let (lmin, lmax) = (eig.min(), eig.max());
    if lmax <= 0.0 || lmin <= lmax * 1e-20 {
        return Err(AnalyticsError::RankDeficientRegressors);
    }
    let qr = design.clone().qr();
    let beta = qr
        .r()
        .solve_upper_triangular(&(qr.q().transpose() * y))
        .ok_or(AnalyticsError::RankDeficientRegressors)?;
    let resid = y - &design * &beta;
    Ok((beta, resid))
}

/// Summary statistics of a per-period return series. With `regressors`
/// (`T x F`, last column the univariate factor) the intercept, last slope and
/// residual volatility of an OLS fit are reported as well.
pub fn performance_report(
    returns: &DVector<f64>,
    regressors: Option<&DMatrix<f64>>,
    periods_per_year: usize,
) -> Result<PerformanceReport, AnalyticsError> {
    let t = returns.len();
    if t < 2 {
        return Err(AnalyticsError::TooFewObservations { need: 2, got: t });
    }
    let ppy = periods_per_year as f64;
    let (mean, sd) = mean_sd(returns);
    if sd == 0.0 {
        return Err(AnalyticsError::ZeroVariance);
    }
    let sr = mean / sd;
    let mut report = PerformanceReport {
        mean_ann: mean * ppy * 100.0,
        sd_ann: sd * ppy.sqrt() * 100.0,
        sharpe_ann: sr * ppy.sqrt(),
        sharpe_t: lo_tstat(sr, t),
        alpha_ann: None,
        beta_uni: None,
        idio_vol_ann: None,
        ir_ann: None,
        ir_t: None,
        periods_per_year,
        n_periods: t,
    };
    if let Some(x) = regressors {
        if t < MIN_REGRESSION_OBS {
            return Err(AnalyticsError::TooFewObservations {
                need: MIN_REGRESSION_OBS,
                got: t,
            });
        }
        let (beta, resid) = ols(returns, x)?;
        let (_, idio) = mean_sd(&resid);
        let alpha = beta[0];
        report.alpha_ann = Some(alpha * ppy * 100.0);
        report.beta_uni = Some(beta[beta.len() - 1]);
        report.idio_vol_ann = Some(idio * ppy.sqrt() * 100.0);
        if idio > 1e-14 {
            let ir = alpha / idio;
            report.ir_ann = Some(ir * ppy.sqrt());
            report.ir_t = Some(lo_tstat(ir, t));
        }
    }
    Ok(report)
}

/// Compounded factor returns over each `(after, through]` holding period.
pub fn period_factor_returns(
    factors: &ReturnPanel,
    periods: &[(NaiveDate, NaiveDate)],
) -> Result<DMatrix<f64>, AnalyticsError> {
    let mut out = DMatrix::zeros(periods.len(), factors.n_assets());
    for (i, &(after, through)) in periods.iter().enumerate() {
        let lo = factors.dates.partition_point(|d| *d <= after);
        let hi = factors.dates.partition_point(|d| *d <= through);
        if hi <= lo {
            return Err(AnalyticsError::MissingFactorData(after, through));
        }
        for c in 0..factors.n_assets() {
            let gross: f64 = (lo..hi).map(|d| 1.0 + factors.values[(d, c)]).product();
            if gross.is_nan() {
                return Err(AnalyticsError::MissingFactorData(after, through));
            }
            out[(i, c)] = gross - 1.0;
        }
    }
    Ok(out)
}

/// Averages over rebalance dates; position statistics use each date's nonzero weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    /// Mean of `sum_i |w_t,i - w_t-1,i|` over `t >= 2` (0 for a single date).
    pub turnover: f64,
    /// Fraction of short positions among nonzero positions.
    pub prop_leverage: f64,
    pub sum_neg: f64,
    pub min_w: f64,
    pub max_w: f64,
    /// Cross-sectional standard deviation of positions.
    pub sd_w: f64,
}

pub fn weight_stats(weights: &DMatrix<f64>) -> WeightStats {
    let t = weights.nrows();
    let turnover = if t >= 2 {
        (1..t)
            .map(|i| (weights.row(i) - weights.row(i - 1)).abs().sum())
            .sum::<f64>()
            / (t - 1) as f64
    } else {
        0.0
    };
    let (mut lev, mut neg, mut lo, mut hi, mut sd) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut used = 0usize;
    for row in weights.row_iter() {
        let pos: Vec<f64> = row.iter().copied().filter(|v| *v != 0.0).collect();
        if pos.is_empty() {
            continue;
        }
        used += 1;
        let n = pos.len() as f64;
        lev += pos.iter().filter(|v| **v < 0.0).count() as f64 / n;
        neg += pos.iter().filter(|v| **v < 0.0).sum::<f64>();
        lo += pos.iter().copied().fold(f64::INFINITY, f64::min);
        hi += pos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = pos.iter().sum::<f64>() / n;
        sd += (pos.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    }
    let avg = |x: f64| if used == 0 { 0.0 } else { x / used as f64 };
    WeightStats {
        turnover,
        prop_leverage: avg(lev),
        sum_neg: avg(neg),
        min_w: avg(lo),
        max_w: avg(hi),
        sd_w: avg(sd),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaticDynamic {
    /// `mean(w)' mean(r)`.
    pub static_part: f64,
    /// `T^-1 sum (w_t - mean(w))'(r_t - mean(r))`.
    pub dynamic_part: f64,
    pub share_dynamic: f64,
}

fn check_aligned(weights: &DMatrix<f64>, returns: &DMatrix<f64>) -> Result<(), AnalyticsError> {
    if weights.shape() != returns.shape() {
        return Err(AnalyticsError::ShapeMismatch(format!(
            "weights {:?}, returns {:?}",
            weights.shape(),
            returns.shape()
        )));
    }
    if weights.nrows() == 0 {
        return Err(AnalyticsError::TooFewObservations { need: 1, got: 0 });
    }
    Ok(())
}

/// Split the average portfolio return into static and dynamic (timing) parts.
/// Row `t` of `returns` is the return earned by row `t` of `weights`.
pub fn static_dynamic_decomp(
    weights: &DMatrix<f64>,
    returns: &DMatrix<f64>,
) -> Result<StaticDynamic, AnalyticsError> {
    check_aligned(weights, returns)?;
    let t = weights.nrows() as f64;
    let w_bar = weights.row_mean();
    let r_bar = returns.row_mean();
    let static_part = w_bar.dot(&r_bar);
    let mut dynamic_part = 0.0;
    for i in 0..weights.nrows() {
        dynamic_part += (weights.row(i) - &w_bar).dot(&(returns.row(i) - &r_bar));
    }
    dynamic_part /= t;
    let total = static_part + dynamic_part;
    if total == 0.0 {
        return Err(AnalyticsError::DivisionDegenerate);
    }
    Ok(StaticDynamic {
        static_part,
        dynamic_part,
        share_dynamic: dynamic_part / total,
    })
}

/// Leg returns at one date: `(long, short, long gross, short gross)`, or
/// `None` unless there are both long and short positions.
pub fn legs_at(w: &[f64], r: &[f64]) -> Option<(f64, f64, f64, f64)> {
    let (mut lg, mut sg, mut lr, mut sr) = (0.0, 0.0, 0.0, 0.0);
    for (&wi, &ri) in w.iter().zip(r) {
        if wi > 0.0 {
            lg += wi;
            lr += wi * ri;
        } else if wi < 0.0 {
            sg -= wi;
            sr -= wi * ri;
        }
    }
    (lg > 0.0 && sg > 0.0).then(|| (lr / lg, sr / sg, lg, sg))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LongShort {
    /// Mean per-period return of the long leg (unit-gross long book).
    pub long_mean: f64,
    /// Mean per-period return of the short leg (unit-gross book of the shorted assets).
    pub short_mean: f64,
    /// Mean gross of the long leg.
    pub l: f64,
    /// Mean gross of the short leg.
    pub l_short: f64,
    /// Dates with both legs present.
    pub n_dates: usize,
}

/// Long and short leg returns averaged over dates that have both legs.
/// Per date, `w'r = l_long * long - l_short * short`.
pub fn long_short_legs(
    weights: &DMatrix<f64>,
    returns: &DMatrix<f64>,
) -> Result<LongShort, AnalyticsError> {
    check_aligned(weights, returns)?;
    let (mut lm, mut sm, mut l, mut ls, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for i in 0..weights.nrows() {
        let w: Vec<f64> = weights.row(i).iter().copied().collect();
        let r: Vec<f64> = returns.row(i).iter().copied().collect();
        if let Some((long, short, lg, sg)) = legs_at(&w, &r) {
            lm += long;
            sm += short;
            l += lg;
            ls += sg;
            n += 1;
        }
    }
    if n == 0 {
        return Ok(LongShort {
            long_mean: f64::NAN,
            short_mean: f64::NAN,
            l: f64::NAN,
            l_short: f64::NAN,
            n_dates: 0,
        });
    }
    let k = n as f64;
    Ok(LongShort {
        long_mean: lm / k,
        short_mean: sm / k,
        l: l / k,
        l_short: ls / k,
        n_dates: n,
    })
}

/// Every reported statistic of one backtest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestSummary {
    pub label: String,
    pub performance: PerformanceReport,
    pub weights: WeightStats,
    pub static_dynamic: Option<StaticDynamic>,
    pub legs: LongShort,
}

/// Regressors for the factor regression: compounded factor returns over each
/// holding period followed by the UNI portfolio's returns as the last column.
pub fn factor_regressors(
    result: &BacktestResult,
    factors: &ReturnPanel,
    uni_returns: &DVector<f64>,
) -> Result<DMatrix<f64>, AnalyticsError> {
    if uni_returns.len() != result.n_rebalances() {
        return Err(AnalyticsError::ShapeMismatch(format!(
            "{} UNI returns for {} periods",
            uni_returns.len(),
            result.n_rebalances()
        )));
    }
    let periods: Vec<_> = result
        .dates
        .iter()
        .copied()
        .zip(result.hold_end_dates.iter().copied())
        .collect();
    let f = period_factor_returns(factors, &periods)?;
    let k = f.ncols();
    let mut x = f.insert_column(k, 0.0);
    x.set_column(k, uni_returns);
    Ok(x)
}

pub fn summarize(
    result: &BacktestResult,
    regressors: Option<&DMatrix<f64>>,
    periods_per_year: usize,
) -> Result<BacktestSummary, AnalyticsError> {
    Ok(BacktestSummary {
        label: result.label.clone(),
        performance: performance_report(&result.realized_returns, regressors, periods_per_year)?,
        weights: weight_stats(&result.weights),
        static_dynamic: match static_dynamic_decomp(&result.weights, &result.asset_returns) {
            Ok(sd) => Some(sd),
            Err(AnalyticsError::DivisionDegenerate) => None,
            Err(e) => return Err(e),
        },
        legs: long_short_legs(&result.weights, &result.asset_returns)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn noise(seed: u64, rows: usize, cols: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, 0.02).unwrap();
        DMatrix::from_fn(rows, cols, |_, _| d.sample(&mut rng))
    }

    #[test]
    fn lo_examples() {
        assert_eq!(lo_tstat(0.0, 50), 0.0);
        assert!((lo_tstat(1.0, 100) - 8.164965809).abs() < 1e-8);
        let t = lo_tstat(1.010 / 12f64.sqrt(), 578);
        assert!((t - 6.872).abs() < 0.05, "{t}");
    }

    #[test]
    fn report_basics() {
        let zero = DVector::zeros(20);
        assert_eq!(
            performance_report(&zero, None, 12).unwrap_err(),
            AnalyticsError::ZeroVariance
        );
        let r = noise(1, 60, 1).column(0).add_scalar(0.01);
        let rep = performance_report(&r, None, 12).unwrap();
        assert!((rep.sharpe_ann - rep.mean_ann / rep.sd_ann).abs() < 1e-10);
        assert!(rep.alpha_ann.is_none());
        assert_eq!(periods_per_year(21), 12);
        assert_eq!(periods_per_year(63), 4);
        assert_eq!(periods_per_year(10), 25);
    }

    #[test]
    fn perfect_fit_on_uni_factor() {
        let f = noise(2, 40, 6);
        let y = f.column(5).into_owned();
        let rep = performance_report(&y, Some(&f), 12).unwrap();
        assert!(rep.alpha_ann.unwrap().abs() < 1e-12);
        assert!((rep.beta_uni.unwrap() - 1.0).abs() < 1e-12);
        assert!(rep.idio_vol_ann.unwrap() < 1e-10);
    }

    #[test]
    fn regression_errors() {
        let f = noise(3, 7, 6);
        let y = noise(4, 7, 1).column(0).into_owned();
        assert_eq!(
            performance_report(&y, Some(&f), 12).unwrap_err(),
            AnalyticsError::TooFewObservations { need: 8, got: 7 }
        );
        let mut f = noise(3, 30, 6);
        let c = f.column(0).into_owned();
        f.set_column(1, &(c * 2.0));
        let y = noise(4, 30, 1).column(0).into_owned();
        assert_eq!(
            performance_report(&y, Some(&f), 12).unwrap_err(),
            AnalyticsError::RankDeficientRegressors
        );
    }

    #[test]
    fn ols_recovers_known_coefficients() {
        let x = noise(5, 50, 3);
        let truth = DVector::from_vec(vec![0.004, 0.5, -1.0, 2.0]);
        let y = x.clone().insert_column(0, 1.0) * &truth;
        let (beta, resid) = ols(&y, &x).unwrap();
        assert!((beta - truth).amax() < 1e-12);
        assert!(resid.amax() < 1e-14);
    }

    #[test]
    fn weight_stat_examples() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(weight_stats(&w).turnover, 2.0);
        let w = DMatrix::from_row_slice(1, 3, &[0.5, -0.25, -0.25]);
        let s = weight_stats(&w);
        assert!((s.prop_leverage - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.sum_neg, -0.5);
        assert_eq!((s.min_w, s.max_w), (-0.25, 0.5));
        let w = DMatrix::from_fn(5, 3, |_, c| [0.5, -0.3, -0.2][c]);
        assert_eq!(weight_stats(&w).turnover, 0.0);
    }

    #[test]
    fn static_dynamic_examples() {
        let r = noise(6, 30, 3).add_scalar(0.01);
        let w = DMatrix::from_fn(30, 3, |_, c| [0.5, -0.3, 0.2][c]);
        let d = static_dynamic_decomp(&w, &r).unwrap();
        assert!(d.dynamic_part.abs() < 1e-15);
        assert_eq!(
            d.share_dynamic,
            d.dynamic_part / (d.static_part + d.dynamic_part)
        );

        let base = noise(7, 30, 2);
        let centered = DMatrix::from_fn(30, 2, |i, j| base[(i, j)] - base.column(j).mean());
        let d = static_dynamic_decomp(&centered, &centered).unwrap();
        assert!(d.static_part.abs() < 1e-15);
        assert!((d.share_dynamic - 1.0).abs() < 1e-12);

        // w_t = r_t: dynamic part equals the trace of the 1/T sample covariance.
        let r = noise(8, 25, 4);
        let d = static_dynamic_decomp(&r, &r).unwrap();
        let mut trace = 0.0;
        for j in 0..4 {
            let m = r.column(j).mean();
            trace += r.column(j).iter().map(|v| (v - m).powi(2)).sum::<f64>() / 25.0;
        }
        assert!((d.dynamic_part - trace).abs() < 1e-15);

        let z = DMatrix::zeros(3, 2);
        assert_eq!(
            static_dynamic_decomp(&z, &z).unwrap_err(),
            AnalyticsError::DivisionDegenerate
        );
    }

    #[test]
    fn long_short_examples() {
        let (long, short, l, ls) = legs_at(&[0.5, -0.5], &[0.10, 0.02]).unwrap();
        assert_eq!((long, short, l, ls), (0.10, 0.02, 0.5, 0.5));
        assert!((l * (long - short) - 0.04).abs() < 1e-15);
        assert!(legs_at(&[0.5, 0.5], &[0.1, 0.2]).is_none());
        let w = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, 1.0, 0.0]);
        let r = DMatrix::from_row_slice(2, 2, &[0.1, 0.02, 0.3, 0.3]);
        let legs = long_short_legs(&w, &r).unwrap();
        assert_eq!(legs.n_dates, 1);
        assert_eq!(legs.long_mean, 0.1);
    }

    #[test]
    fn factor_period_compounding() {
        let d = |i: u32| NaiveDate::from_ymd_opt(2020, 1, i).unwrap();
        let f = ReturnPanel::new(
            (1..=6).map(d).collect(),
            vec!["Mkt-RF".into()],
            DMatrix::from_column_slice(6, 1, &[0.01, 0.02, -0.01, 0.0, 0.03, 0.01]),
        )
        .unwrap();
        let out = period_factor_returns(&f, &[(d(1), d(3)), (d(3), d(6))]).unwrap();
        assert!((out[(0, 0)] - (1.02 * 0.99 - 1.0)).abs() < 1e-15);
        assert!((out[(1, 0)] - (1.0 * 1.03 * 1.01 - 1.0)).abs() < 1e-15);
        assert!(period_factor_returns(&f, &[(d(6), d(6))]).is_err());
    }

    proptest! {
        #[test]
        fn decomposition_is_exact(seed in 0u64..10_000, t in 2usize..40) {
            let w = noise(seed, t, 4);
            let r = noise(seed + 1, t, 4).add_scalar(0.005);
            let avg: f64 = (0..t).map(|i| w.row(i).dot(&r.row(i))).sum::<f64>() / t as f64;
            if let Ok(d) = static_dynamic_decomp(&w, &r) {
                prop_assert!((d.static_part + d.dynamic_part - avg).abs() < 1e-12);
            }
        }

        #[test]
        fn leg_identity(w in prop::collection::vec(-1.0f64..1.0, 2..12), seed in 0u64..1000) {
            let r: Vec<f64> = noise(seed, w.len(), 1).iter().copied().collect();
            if let Some((long, short, lg, sg)) = legs_at(&w, &r) {
                let wr: f64 = w.iter().zip(&r).map(|(a, b)| a * b).sum();
                prop_assert!((lg * long - sg * short - wr).abs() < 1e-12);
            }
        }

        #[test]
        fn sharpe_scale_invariance(seed in 0u64..1000, c in 0.01f64..100.0) {
            let f = noise(seed, 30, 6);
            let y = noise(seed + 7, 30, 1).column(0).add_scalar(0.003);
            let a = performance_report(&y, Some(&f), 12).unwrap();
            let b = performance_report(&(&y * c), Some(&f), 12).unwrap();
            prop_assert!((a.sharpe_ann - b.sharpe_ann).abs() < 1e-9);
            prop_assert!((b.alpha_ann.unwrap() - c * a.alpha_ann.unwrap()).abs() < 1e-9 * c.max(1.0));
            prop_assert!((b.idio_vol_ann.unwrap() - c * a.idio_vol_ann.unwrap()).abs() < 1e-9 * c.max(1.0));
        }

        #[test]
        fn lo_monotone(sr in 0.0f64..3.0, t in 2usize..1000) {
            prop_assert!(lo_tstat(sr + 0.01, t) > lo_tstat(sr, t));
            prop_assert!(sr == 0.0 || lo_tstat(sr, t + 1) > lo_tstat(sr, t));
        }
    }
}
