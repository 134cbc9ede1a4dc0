//! Walk-forward backtest.
//!
//! Daily returns are cut into blocks of `horizon_days` starting `warmup_days`
//! into the sample. Rebalance `k` happens at the start of block `k`: the
//! universe is every asset with complete daily data over the previous
//! `window_blocks` blocks and over block `k` itself, moments come from the
//! `window_blocks - 1` pairs (signal at the start of block `j`, return of block
//! `j`) inside the window, and the resulting weights are held through block `k`.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cca::{cca_decompose, CcaDecomposition};
use crate::data::{aggregate_to_blocks, eligibility_mask, BlockCalendar, DatasetId, ReturnPanel};
use crate::moments::{estimate_moments, sample_moments, DemeanFlags, MomentConfig};
use crate::policy::{
    cp_policy, cross_sectional_demean, fully_invested, gmv_weights, mvo_policy, normalize_gross,
    pp_policy, reg_policy, uni_policy, weights_from_policy, PolicyError, PolicyKind, PolicySpec,
    WeightVector,
};
use crate::signals::{blend_equal, momentum_raw, rank_normalize, SignalSpec};
use crate::Error;

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid backtest config: {0}")]
    InvalidConfig(String),
    #[error("rebalance {date}: {source}")]
    AtDate {
        date: NaiveDate,
        #[source]
        source: Box<Error>,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestConfig {
    pub dataset: DatasetId,
    pub policy: PolicySpec,
    pub signals: Vec<SignalSpec>,
    pub window_blocks: usize,
    pub horizon_days: usize,
    pub buffer_days: usize,
    /// Trading days skipped at the start of the sample before the first block.
    pub warmup_days: usize,
    /// Daily data before this date is dropped.
    pub start_date: Option<NaiveDate>,
    /// Daily data after this date is dropped.
    pub end_date: Option<NaiveDate>,
    pub moments: MomentConfig,
    /// Flip canonical directions to agree with the previous date's.
    pub sign_align: bool,
    /// Keep per-date decompositions (canonical policies only).
    pub keep_snapshots: bool,
    pub seed: u64,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetId::builtin("FF25").expect("FF25 is built in"),
            policy: PolicySpec::default(),
            signals: vec![SignalSpec::momentum(21)],
            window_blocks: 120,
            horizon_days: 21,
            buffer_days: 1,
            warmup_days: 252,
            start_date: NaiveDate::from_ymd_opt(1963, 7, 1),
            end_date: None,
            moments: MomentConfig::default(),
            sign_align: true,
            keep_snapshots: false,
            seed: 0,
        }
    }
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<(), BacktestError> {
        let bad = |m: &str| Err(BacktestError::InvalidConfig(m.to_string()));
        if self.window_blocks < 2 {
            return bad("window_blocks must be at least 2");
        }
        if self.horizon_days == 0 {
            return bad("horizon_days must be at least 1");
        }
        if self.signals.is_empty() {
            return bad("at least one signal is required");
        }
        if self.signals.iter().any(|s| s.lookback_days == 0) {
            return bad("signal lookback must be at least 1 day");
        }
        if !(self.policy.gamma.is_finite() && self.policy.gamma > 0.0) {
            return bad("gamma must be positive");
        }
        if self.policy.k == 0 {
            return bad("k must be at least 1");
        }
        if let (Some(s), Some(e)) = (self.start_date, self.end_date) {
            if s > e {
                return bad("start_date is after end_date");
            }
        }
        Ok(())
    }

    fn signal_specs(&self) -> Vec<SignalSpec> {
        self.signals
            .iter()
            .map(|s| SignalSpec {
                buffer_days: self.buffer_days,
                ..*s
            })
            .collect()
    }

    pub fn label(&self) -> String {
        self.policy.label()
    }
}

/// Canonical decomposition at one rebalance, embedded in the full asset set.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompSnapshot {
    pub date: NaiveDate,
    /// All squared canonical correlations, descending.
    pub s2: DVector<f64>,
    /// Truncated decomposition; rows of `u`/`q_r` follow the full asset list
    /// and rows of `v`/`q_x` the full stacked signal list, zero for assets
    /// outside the universe.
    pub decomp: CcaDecomposition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestResult {
    pub label: String,
    pub assets: Vec<String>,
    /// Rebalance dates (last trading day before each holding block).
    pub dates: Vec<NaiveDate>,
    /// Last trading day of each holding block.
    pub hold_end_dates: Vec<NaiveDate>,
    /// One row per rebalance, zero for assets outside the universe.
    pub weights: DMatrix<f64>,
    pub realized_returns: DVector<f64>,
    /// Block returns over each holding period; missing values are zero and
    /// always carry zero weight.
    pub asset_returns: DMatrix<f64>,
    pub universe_sizes: Vec<usize>,
    /// Weights formed at the end of the sample, with no holding period yet.
    pub terminal_weights: Option<(NaiveDate, DVector<f64>)>,
    pub snapshots: Vec<DecompSnapshot>,
}

impl BacktestResult {
    pub fn n_rebalances(&self) -> usize {
        self.dates.len()
    }

    /// Every weight vector formed, including the terminal one.
    pub fn all_weights(&self) -> (Vec<NaiveDate>, DMatrix<f64>) {
        match &self.terminal_weights {
            None => (self.dates.clone(), self.weights.clone()),
            Some((d, w)) => {
                let mut dates = self.dates.clone();
                dates.push(*d);
                let n = self.weights.nrows();
                let mut m = self.weights.clone().insert_row(n, 0.0);
                m.row_mut(n).copy_from(&w.transpose());
                (dates, m)
            }
        }
    }

    /// Weights at rebalance `t` as a [`WeightVector`].
    pub fn weight_vector(&self, t: usize) -> WeightVector {
        WeightVector::new(self.weights.row(t).transpose()).with_date(self.dates[t])
    }
}

/// Estimation window at one rebalance, restricted to its universe.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowData {
    /// Column indices into the panel's asset list.
    pub universe: Vec<usize>,
    pub returns: DMatrix<f64>,
    pub signals: DMatrix<f64>,
    pub x_now: DVector<f64>,
}

/// Walk-forward state shared by all rebalances.
pub struct BacktestEngine {
    cfg: BacktestConfig,
    specs: Vec<SignalSpec>,
    panel: ReturnPanel,
    calendar: BlockCalendar,
    blocks: ReturnPanel,
}

struct StepOutput {
    weights: DVector<f64>,
    universe: usize,
    snapshot: Option<(DVector<f64>, CcaDecomposition)>,
}

fn trim_panel(
    panel: &ReturnPanel,
    start: Option<NaiveDate>,
    end: Option<NaiveDate>,
) -> ReturnPanel {
    let lo = start.map_or(0, |d| panel.dates.partition_point(|x| *x < d));
    let hi = end.map_or(panel.n_dates(), |d| {
        panel.dates.partition_point(|x| *x <= d)
    });
    panel.slice_rows(lo..hi.max(lo))
}

impl BacktestEngine {
    pub fn new(cfg: &BacktestConfig, panel: &ReturnPanel) -> Result<Self, BacktestError> {
        cfg.validate()?;
        let panel = trim_panel(panel, cfg.start_date, cfg.end_date);
        let calendar = BlockCalendar::new(panel.n_dates(), cfg.horizon_days, cfg.warmup_days)
            .map_err(|e| BacktestError::InvalidConfig(e.to_string()))?;
        if calendar.len() < cfg.window_blocks + 1 {
            return Err(BacktestError::InsufficientData(format!(
                "{} complete blocks, need at least {}",
                calendar.len(),
                cfg.window_blocks + 1
            )));
        }
        let specs = cfg.signal_specs();
        let needed = specs
            .iter()
            .map(SignalSpec::history_days)
            .max()
            .unwrap_or(0);
        if calendar.block_start(1) < needed {
            return Err(BacktestError::InsufficientData(format!(
                "signals need {needed} days of history before the second block, which starts at day {}",
                calendar.block_start(1)
            )));
        }
        let blocks = aggregate_to_blocks(&panel, &calendar)
            .map_err(|e| BacktestError::InsufficientData(e.to_string()))?;
        Ok(Self {
            cfg: cfg.clone(),
            specs,
            panel,
            calendar,
            blocks,
        })
    }

    pub fn calendar(&self) -> &BlockCalendar {
        &self.calendar
    }

    pub fn window(&self) -> usize {
        self.cfg.window_blocks
    }

    /// Block indices that get a realized return.
    pub fn rebalance_blocks(&self) -> std::ops::Range<usize> {
        self.cfg.window_blocks..self.calendar.len()
    }

    /// Last trading day before block `k`.
    pub fn boundary_date(&self, k: usize) -> NaiveDate {
        self.panel.dates[self.calendar.block_start(k) - 1]
    }

    /// Stacked normalized signals over `universe` at the start of block `j`,
    /// or `None` if some raw signal is not finite.
    fn signal_vector(&self, j: usize, universe: &[usize]) -> Result<Option<DVector<f64>>, Error> {
        let day = self.calendar.block_start(j);
        let n = universe.len();
        let mut x = DVector::zeros(n * self.specs.len());
        for (m, spec) in self.specs.iter().enumerate() {
            let raw = momentum_raw(&self.panel, spec, day, universe)?;
            if raw.iter().any(|v| !v.is_finite()) {
                return Ok(None);
            }
            x.rows_mut(m * n, n).copy_from(&rank_normalize(&raw)?);
        }
        Ok(Some(x))
    }

    /// Drop assets whose raw signal is missing anywhere in the window.
    fn complete_signal_universe(
        &self,
        k: usize,
        eligible: Vec<usize>,
    ) -> Result<Vec<usize>, Error> {
        let first = k + 1 - self.cfg.window_blocks;
        let mut keep = eligible;
        for spec in &self.specs {
            for j in first..=k {
                let raw = momentum_raw(&self.panel, spec, self.calendar.block_start(j), &keep)?;
                keep = keep
                    .iter()
                    .zip(raw.iter())
                    .filter(|(_, v)| v.is_finite())
                    .map(|(c, _)| *c)
                    .collect();
            }
        }
        Ok(keep)
    }

    fn universe_at(&self, k: usize, lookahead: usize) -> Result<Vec<usize>, Error> {
        let eligible = eligibility_mask(
            &self.panel,
            &self.calendar,
            k,
            self.cfg.window_blocks,
            lookahead,
        );
        self.complete_signal_universe(k, eligible)
    }

    fn window_for(&self, k: usize, universe: Vec<usize>) -> Result<WindowData, Error> {
        let n = universe.len();
        let first = k + 1 - self.cfg.window_blocks;
        let pairs = self.cfg.window_blocks - 1;
        let mut returns = DMatrix::zeros(pairs, n);
        let mut signals = DMatrix::zeros(pairs, n * self.specs.len());
        for (row, j) in (first..k).enumerate() {
            for (c, &a) in universe.iter().enumerate() {
                returns[(row, c)] = self.blocks.values[(j, a)];
            }
            let xj = self
                .signal_vector(j, &universe)?
                .expect("universe has finite signals");
            signals.row_mut(row).copy_from(&xj.transpose());
        }
        let x_now = self
            .signal_vector(k, &universe)?
            .expect("universe has finite signals");
        Ok(WindowData {
            universe,
            returns,
            signals,
            x_now,
        })
    }

    /// Estimation inputs at rebalance block `k`: the universe, the trailing
    /// `(x_tau, r_tau+1)` pairs and the current signal vector. `None` when
    /// fewer than two assets qualify.
    pub fn window_data(&self, k: usize, lookahead: usize) -> Result<Option<WindowData>, Error> {
        let universe = self.universe_at(k, lookahead)?;
        if universe.len() < 2 {
            return Ok(None);
        }
        self.window_for(k, universe).map(Some)
    }

    fn step(&self, k: usize, lookahead: usize) -> Result<StepOutput, Error> {
        let n_all = self.panel.n_assets();
        let universe = self.universe_at(k, lookahead)?;
        let flat = StepOutput {
            weights: DVector::zeros(n_all),
            universe: universe.len(),
            snapshot: None,
        };
        if universe.len() < 2 {
            return Ok(flat);
        }
        let WindowData {
            universe,
            returns: r,
            signals: x,
            x_now,
        } = self.window_for(k, universe)?;
        let n = universe.len();
        if x_now.iter().all(|v| *v == 0.0) {
            return Ok(flat);
        }
        let spec = self.cfg.policy;
        let gamma = spec.gamma;
        let mut snapshot = None;
        let w_local = match spec.kind {
            PolicyKind::Cp => {
                let m = estimate_moments(&r, &x, &self.cfg.moments)?;
                let d = cca_decompose(&m)?;
                let s2 = d.squared();
                let dk = d.truncate(spec.k.min(d.k()))?;
                let a = cp_policy(&dk, gamma, spec.mode)?;
                if self.cfg.keep_snapshots {
                    snapshot = Some((s2, embed_decomp(&dk, &universe, n_all, self.specs.len())));
                }
                weights_from_policy(&a, &x_now)?
            }
            PolicyKind::Pp => {
                let demean = DemeanFlags {
                    returns: self.cfg.moments.demean.returns,
                    signals: self.cfg.moments.demean.signals,
                };
                let sm = sample_moments(&cross_sectional_demean(&r), &x, demean)?;
                let max_k = sm.sigma_rx.nrows().min(sm.sigma_rx.ncols());
                let a = pp_policy(&sm.sigma_rx, spec.k.min(max_k), gamma)?;
                weights_from_policy(&a, &x_now)?
            }
            PolicyKind::Mvo => {
                let m = estimate_moments(&r, &x, &self.cfg.moments)?;
                mvo_policy(&m.sigma_r, &blend_equal(&x_now, n), gamma, m.eig_floor_rel)?
            }
            PolicyKind::Uni => uni_policy(&blend_equal(&x_now, n)),
            PolicyKind::Reg => {
                let m = estimate_moments(&r, &x, &self.cfg.moments)?;
                reg_policy(&m, &x_now, gamma)?
            }
            PolicyKind::FullyInvested => {
                let m = estimate_moments(&r, &x, &self.cfg.moments)?;
                match fully_invested(&m, &x_now, gamma) {
                    Err(PolicyError::DivisionDegenerate) => {
                        gmv_weights(&m.sigma_r, m.eig_floor_rel)?
                    }
                    other => other?,
                }
            }
        };
        let w_local = if spec.gross_normalized() {
            normalize_gross(&w_local)
        } else {
            w_local
        };
        let mut weights = DVector::zeros(n_all);
        for (c, &a) in universe.iter().enumerate() {
            weights[a] = w_local.w[c];
        }
        Ok(StepOutput {
            weights,
            universe: n,
            snapshot,
        })
    }

    fn step_at(&self, k: usize, lookahead: usize) -> Result<StepOutput, BacktestError> {
        self.step(k, lookahead).map_err(|e| BacktestError::AtDate {
            date: self.boundary_date(k),
            source: Box::new(e),
        })
    }

    pub fn run(&self) -> Result<BacktestResult, BacktestError> {
        let ks: Vec<usize> = self.rebalance_blocks().collect();
        let steps: Vec<StepOutput> = ks
            .par_iter()
            .map(|&k| self.step_at(k, 1))
            .collect::<Result<_, _>>()?;
        let n_all = self.panel.n_assets();
        let t = ks.len();
        let mut weights = DMatrix::zeros(t, n_all);
        let mut asset_returns = DMatrix::zeros(t, n_all);
        let mut realized = DVector::zeros(t);
        let mut snapshots = Vec::new();
        for (i, (&k, step)) in ks.iter().zip(&steps).enumerate() {
            weights.row_mut(i).copy_from(&step.weights.transpose());
            for a in 0..n_all {
                let v = self.blocks.values[(k, a)];
                asset_returns[(i, a)] = if v.is_nan() { 0.0 } else { v };
            }
            realized[i] = weights.row(i).dot(&asset_returns.row(i));
            if let Some((s2, d)) = &step.snapshot {
                snapshots.push(DecompSnapshot {
                    date: self.boundary_date(k),
                    s2: s2.clone(),
                    decomp: d.clone(),
                });
            }
        }
        if self.cfg.sign_align {
            for i in 1..snapshots.len() {
                let (prev, cur) = snapshots.split_at_mut(i);
                if let Ok(aligned) = sign_align(&cur[0].decomp, &prev[i - 1].decomp) {
                    cur[0].decomp = aligned;
                }
            }
        }
        let kk = self.calendar.len();
        let terminal = self.step_at(kk, 0)?;
        Ok(BacktestResult {
            label: self.cfg.label(),
            assets: self.panel.assets.clone(),
            dates: ks.iter().map(|&k| self.boundary_date(k)).collect(),
            hold_end_dates: ks.iter().map(|&k| self.blocks.dates[k]).collect(),
            weights,
            realized_returns: realized,
            asset_returns,
            universe_sizes: steps.iter().map(|s| s.universe).collect(),
            terminal_weights: Some((self.boundary_date(kk), terminal.weights)),
            snapshots,
        })
    }
}

fn embed_decomp(
    d: &CcaDecomposition,
    universe: &[usize],
    n_all: usize,
    n_signals: usize,
) -> CcaDecomposition {
    let n = universe.len();
    let k = d.k();
    let embed = |m: &DMatrix<f64>, blocks: usize| {
        let mut out = DMatrix::zeros(n_all * blocks, k);
        for b in 0..blocks {
            for (c, &a) in universe.iter().enumerate() {
                out.row_mut(b * n_all + a).copy_from(&m.row(b * n + c));
            }
        }
        out
    };
    CcaDecomposition {
        s: d.s.clone(),
        u: embed(&d.u, 1),
        v: embed(&d.v, n_signals),
        q_r: embed(&d.q_r, 1),
        q_x: embed(&d.q_x, n_signals),
    }
}

pub fn run_backtest(
    cfg: &BacktestConfig,
    panel: &ReturnPanel,
) -> Result<BacktestResult, BacktestError> {
    BacktestEngine::new(cfg, panel)?.run()
}

/// Flip each canonical pair of `current` whose return direction points away
/// from the matching direction in `previous` (negative cosine similarity).
pub fn sign_align(
    current: &CcaDecomposition,
    previous: &CcaDecomposition,
) -> Result<CcaDecomposition, BacktestError> {
    if current.q_r.shape() != previous.q_r.shape() || current.q_x.shape() != previous.q_x.shape() {
        return Err(BacktestError::ShapeMismatch(format!(
            "directions {:?} vs {:?}",
            current.q_r.shape(),
            previous.q_r.shape()
        )));
    }
    let mut out = current.clone();
    for i in 0..current.k() {
        if current.q_r.column(i).dot(&previous.q_r.column(i)) < 0.0 {
            out.flip(i);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::ShrinkageConfig;
    use crate::policy::PolicyMode;

    fn day(i: usize) -> NaiveDate {
        NaiveDate::from_ymd_opt(1990, 1, 1).unwrap() + chrono::Days::new(i as u64)
    }

    fn toy_panel(n_days: usize, n_assets: usize, seed: u64) -> ReturnPanel {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let values = DMatrix::from_fn(n_days, n_assets, |_, _| noise.sample(&mut rng));
        ReturnPanel::new(
            (0..n_days).map(day).collect(),
            (0..n_assets).map(|i| format!("A{i}")).collect(),
            values,
        )
        .unwrap()
    }

    fn small_cfg(policy: &str) -> BacktestConfig {
        BacktestConfig {
            policy: policy.parse().unwrap(),
            window_blocks: 12,
            horizon_days: 5,
            warmup_days: 25,
            start_date: None,
            ..BacktestConfig::default()
        }
    }

    #[test]
    fn sign_align_cases() {
        let m = crate::moments::MomentEstimates::population(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 2, &[0.3, 0.1, -0.2, 0.4]),
        )
        .unwrap();
        let d = cca_decompose(&m).unwrap();
        assert_eq!(sign_align(&d, &d).unwrap(), d);
        let mut neg = d.clone();
        neg.flip(0);
        neg.flip(1);
        assert_eq!(sign_align(&d, &neg).unwrap(), neg);
        let mut orth = d.clone();
        orth.q_r = DMatrix::from_row_slice(
            2,
            2,
            &[-d.q_r[(1, 0)], -d.q_r[(1, 1)], d.q_r[(0, 0)], d.q_r[(0, 1)]],
        );
        assert_eq!(sign_align(&d, &orth).unwrap(), d);
        let t = d.truncate(1).unwrap();
        assert!(sign_align(&t, &d).is_err());
    }

    #[test]
    fn counts_and_invariants() {
        let p = toy_panel(25 + 5 * 20 + 3, 4, 1);
        for policy in ["cp2", "cp-full-2", "pp2", "mvo", "uni", "reg"] {
            let res = run_backtest(&small_cfg(policy), &p).unwrap();
            assert_eq!(res.n_rebalances(), 20 - 12);
            assert_eq!(res.weights.nrows(), res.realized_returns.len());
            assert_eq!(res.all_weights().1.nrows(), res.n_rebalances() + 1);
            for row in res.all_weights().1.row_iter() {
                let g: f64 = row.iter().map(|v| v.abs()).sum();
                assert!(g == 0.0 || (g - 1.0).abs() < 1e-12, "{policy}: gross {g}");
            }
        }
        let fi = run_backtest(&small_cfg("fully-invested"), &p).unwrap();
        for row in fi.weights.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn insufficient_data() {
        let p = toy_panel(25 + 5 * 12, 3, 2);
        assert!(matches!(
            run_backtest(&small_cfg("cp2"), &p),
            Err(BacktestError::InsufficientData(_))
        ));
    }

    #[test]
    fn missing_asset_leaves_universe() {
        let mut p = toy_panel(25 + 5 * 20, 4, 3);
        p.values[(25 + 5 * 15 + 2, 3)] = f64::NAN;
        let res = run_backtest(&small_cfg("uni"), &p).unwrap();
        // Block 15 holds the gap; rebalances 15..=19 (rows 3..8) cannot use asset 3.
        for (i, k) in (12..20).enumerate() {
            let expect_out = k >= 15;
            assert_eq!(res.weights[(i, 3)] == 0.0, expect_out, "rebalance {k}");
            assert_eq!(res.universe_sizes[i], if expect_out { 3 } else { 4 });
        }
    }

    #[test]
    fn deterministic_and_snapshot_alignment() {
        let p = toy_panel(25 + 5 * 22, 5, 4);
        let cfg = BacktestConfig {
            keep_snapshots: true,
            ..small_cfg("cp2")
        };
        let a = run_backtest(&cfg, &p).unwrap();
        let b = run_backtest(&cfg, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.snapshots.len(), a.n_rebalances());
        for w in a.snapshots.windows(2) {
            for i in 0..2 {
                assert!(w[1].decomp.q_r.column(i).dot(&w[0].decomp.q_r.column(i)) >= 0.0);
            }
        }
    }

    #[test]
    fn cp_weights_match_inverse_oracle() {
        // Untruncated CP with fixed shrinkage equals Sigma_r^-1 Sigma_rx Sigma_x^-1 x.
        let (dr, dx) = (0.1, 0.5);
        let cfg = BacktestConfig {
            moments: MomentConfig {
                shrinkage: ShrinkageConfig {
                    mode_r: crate::moments::ShrinkageMode::Fixed(dr),
                    mode_x: crate::moments::ShrinkageMode::Fixed(dx),
                    ..ShrinkageConfig::default()
                },
                ..MomentConfig::default()
            },
            policy: PolicySpec {
                mode: PolicyMode::Approx,
                k: 3,
                ..PolicySpec::default()
            },
            ..small_cfg("cp3")
        };
        let p = toy_panel(25 + 5 * 16, 3, 9);
        let res = run_backtest(&cfg, &p).unwrap();
        let engine = BacktestEngine::new(&cfg, &p).unwrap();
        let shrink = |s: &DMatrix<f64>, d: f64| {
            let mu = s.trace() / s.nrows() as f64;
            s * (1.0 - d) + DMatrix::identity(s.nrows(), s.nrows()) * (mu * d)
        };
        let cov = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
            let t = a.nrows() as f64;
            let ca = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] - a.column(j).mean());
            let cb = DMatrix::from_fn(b.nrows(), b.ncols(), |i, j| b[(i, j)] - b.column(j).mean());
            ca.transpose() * cb / t
        };
        let universe = [0usize, 1, 2];
        for (i, k) in engine.rebalance_blocks().enumerate() {
            let first = k + 1 - cfg.window_blocks;
            let rows = cfg.window_blocks - 1;
            let r = DMatrix::from_fn(rows, 3, |t, c| engine.blocks.values[(first + t, c)]);
            let x = DMatrix::from_fn(rows, 3, |t, c| {
                engine.signal_vector(first + t, &universe).unwrap().unwrap()[c]
            });
            let inv_r = shrink(&cov(&r, &r), dr).try_inverse().unwrap();
            let inv_x = shrink(&cov(&x, &x), dx).try_inverse().unwrap();
            let x_now = engine.signal_vector(k, &universe).unwrap().unwrap();
            let w = inv_r * cov(&r, &x) * inv_x * x_now;
            let w = &w / w.iter().map(|v| v.abs()).sum::<f64>();
            let got = res.weights.row(i).transpose();
            assert!((&got - &w).amax() < 1e-9, "{i}: {got} vs {w}");
        }
    }

    #[test]
    fn no_lookahead() {
        let p = toy_panel(25 + 5 * 20, 4, 5);
        let cfg = small_cfg("cp2");
        let full = run_backtest(&cfg, &p).unwrap();
        let engine = BacktestEngine::new(&cfg, &p).unwrap();
        let k = 15;
        let cut = engine.calendar().block_start(k) + cfg.horizon_days;
        let mut truncated = p.clone();
        for d in cut..p.n_dates() {
            truncated.values.row_mut(d).fill(0.0);
        }
        let part = run_backtest(&cfg, &truncated).unwrap();
        let upto = k - cfg.window_blocks;
        for i in 0..=upto {
            assert_eq!(full.weights.row(i), part.weights.row(i));
            assert_eq!(full.realized_returns[i], part.realized_returns[i]);
        }
    }

    #[test]
    fn date_trimming() {
        let p = toy_panel(200, 3, 6);
        let cfg = BacktestConfig {
            start_date: Some(day(10)),
            end_date: Some(day(180)),
            ..small_cfg("uni")
        };
        let engine = BacktestEngine::new(&cfg, &p).unwrap();
        assert_eq!(engine.panel.n_dates(), 171);
        assert_eq!(engine.calendar().len(), (171 - 25) / 5);
    }
}
