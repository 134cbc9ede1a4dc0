//! Cross-sectional momentum signals.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{check_shape, read_panel_csv, write_panel_csv, DataError, ReturnPanel};

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("need {needed} days of history before day {day}, have {available}")]
    InsufficientHistory {
        day: usize,
        needed: usize,
        available: usize,
    },
    #[error("rank normalization needs at least 2 assets, got {0}")]
    TooFewAssets(usize),
    #[error("non-finite raw signal for asset {0}")]
    NonFinite(usize),
    #[error("signal panels are not aligned: {0}")]
    AlignmentMismatch(String),
    #[error("invalid signal spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SignalKind {
    #[default]
    Momentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignalSpec {
    pub kind: SignalKind,
    pub lookback_days: usize,
    /// Days immediately before the rebalance that are skipped.
    pub buffer_days: usize,
}

impl Default for SignalSpec {
    fn default() -> Self {
        Self::momentum(21)
    }
}

impl SignalSpec {
    pub fn momentum(lookback_days: usize) -> Self {
        Self {
            kind: SignalKind::Momentum,
            lookback_days,
            buffer_days: 1,
        }
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if self.lookback_days == 0 {
            return Err(SignalError::InvalidSpec(
                "lookback_days must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Days of history needed before a rebalance.
    pub fn history_days(&self) -> usize {
        self.lookback_days + self.buffer_days
    }

    pub fn name(&self) -> String {
        match self.kind {
            SignalKind::Momentum => format!("mom{}", self.lookback_days),
        }
    }
}

/// Mean daily return of each asset in `assets` over the `lookback_days` days
/// ending `buffer_days` before day index `day` (exclusive).
pub fn momentum_raw(
    panel: &ReturnPanel,
    spec: &SignalSpec,
    day: usize,
    assets: &[usize],
) -> Result<DVector<f64>, SignalError> {
    spec.validate()?;
    let needed = spec.history_days();
    if day < needed || day > panel.n_dates() {
        return Err(SignalError::InsufficientHistory {
            day,
            needed,
            available: day.min(panel.n_dates()),
        });
    }
    let start = day - needed;
    let rows = panel.values.rows(start, spec.lookback_days);
    Ok(DVector::from_iterator(
        assets.len(),
        assets.iter().map(|&c| rows.column(c).mean()),
    ))
}

/// Average ranks divided by `N`, centered, then scaled to unit gross exposure.
/// All-tied input gives the zero vector.
pub fn rank_normalize(raw: &DVector<f64>) -> Result<DVector<f64>, SignalError> {
    let n = raw.len();
    if n < 2 {
        return Err(SignalError::TooFewAssets(n));
    }
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(SignalError::NonFinite(i));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| raw[a].total_cmp(&raw[b]));
    let mut ranks = DVector::zeros(n);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && raw[order[j + 1]] == raw[order[i]] {
            j += 1;
        }
        // Positions i..=j share the average of ranks i+1..=j+1.
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg / n as f64;
        }
        i = j + 1;
    }
    let centered = ranks.add_scalar(-ranks.mean());
    let gross: f64 = centered.iter().map(|v| v.abs()).sum();
    if gross < 1e-14 {
        return Ok(DVector::zeros(n));
    }
    Ok(centered / gross)
}

/// Normalized signals on rebalance dates. Columns are grouped by signal: block
/// `m` holds signal `m` for every asset, in asset order.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalPanel {
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<String>,
    pub signals: Vec<String>,
    pub values: DMatrix<f64>,
}

impl SignalPanel {
    pub fn new(
        dates: Vec<NaiveDate>,
        assets: Vec<String>,
        signals: Vec<String>,
        values: DMatrix<f64>,
    ) -> Result<Self, SignalError> {
        let cols = column_names(&assets, &signals);
        check_shape(&dates, &cols, &values)?;
        Ok(Self {
            dates,
            assets,
            signals,
            values,
        })
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn n_signals(&self) -> usize {
        self.signals.len()
    }

    /// Stacked signal vector `x_t` (length `N * M`).
    pub fn row(&self, t: usize) -> DVector<f64> {
        self.values.row(t).transpose()
    }

    /// Signal `m` across assets on date `t`.
    pub fn block(&self, t: usize, m: usize) -> DVector<f64> {
        let n = self.n_assets();
        DVector::from_iterator(n, self.values.row(t).columns(m * n, n).iter().copied())
    }

    pub fn column_names(&self) -> Vec<String> {
        column_names(&self.assets, &self.signals)
    }

    pub fn to_csv_string(&self) -> Result<String, SignalError> {
        Ok(write_panel_csv(
            &self.dates,
            &self.column_names(),
            &self.values,
        )?)
    }

    pub fn from_csv_str(text: &str) -> Result<Self, SignalError> {
        let (dates, cols, values) = read_panel_csv(text)?;
        let mut assets = Vec::new();
        let mut signals: Vec<String> = Vec::new();
        for c in &cols {
            let (a, s) = c.rsplit_once('#').ok_or_else(|| {
                SignalError::Data(DataError::MalformedHeader(format!(
                    "column '{c}' is not <asset>#<signal>"
                )))
            })?;
            if signals.is_empty() || signals.last().map(String::as_str) != Some(s) {
                signals.push(s.to_string());
            }
            if signals.len() == 1 {
                assets.push(a.to_string());
            }
        }
        if column_names(&assets, &signals) != cols {
            return Err(DataError::MalformedHeader(
                "signal columns are not in block layout".into(),
            )
            .into());
        }
        Self::new(dates, assets, signals, values)
    }
}

/// Signal-major stacked column names `<asset>#<signal>`.
pub fn column_names(assets: &[String], signals: &[String]) -> Vec<String> {
    signals
        .iter()
        .flat_map(|s| assets.iter().map(move |a| format!("{a}#{s}")))
        .collect()
}

/// Normalized momentum on each listed day over all assets. Assets without a
/// finite raw value on a date are set to `NaN` and left out of that date's ranking.
pub fn momentum_panel(
    panel: &ReturnPanel,
    spec: &SignalSpec,
    days: &[usize],
) -> Result<SignalPanel, SignalError> {
    let n = panel.n_assets();
    let all: Vec<usize> = (0..n).collect();
    let mut values = DMatrix::from_element(days.len(), n, f64::NAN);
    let mut dates = Vec::with_capacity(days.len());
    for (t, &day) in days.iter().enumerate() {
        let raw = momentum_raw(panel, spec, day, &all)?;
        let keep: Vec<usize> = (0..n).filter(|&i| raw[i].is_finite()).collect();
        if keep.len() >= 2 {
            let sub = DVector::from_iterator(keep.len(), keep.iter().map(|&i| raw[i]));
            let norm = rank_normalize(&sub)?;
            for (j, &i) in keep.iter().enumerate() {
                values[(t, i)] = norm[j];
            }
        }
        dates.push(panel.dates[day - 1]);
    }
    SignalPanel::new(dates, panel.assets.clone(), vec![spec.name()], values)
}

/// Concatenate signal blocks of aligned panels.
pub fn stack_signals(panels: &[SignalPanel]) -> Result<SignalPanel, SignalError> {
    let first = panels
        .first()
        .ok_or_else(|| SignalError::AlignmentMismatch("no panels to stack".into()))?;
    for p in &panels[1..] {
        if p.dates != first.dates {
            return Err(SignalError::AlignmentMismatch(
                "rebalance dates differ".into(),
            ));
        }
        if p.assets != first.assets {
            return Err(SignalError::AlignmentMismatch("asset lists differ".into()));
        }
    }
    let signals = panels
        .iter()
        .flat_map(|p| p.signals.iter().cloned())
        .collect();
    let blocks: Vec<&DMatrix<f64>> = panels.iter().map(|p| &p.values).collect();
    let total: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut values = DMatrix::zeros(first.dates.len(), total);
    let mut at = 0;
    for b in blocks {
        values.columns_mut(at, b.ncols()).copy_from(b);
        at += b.ncols();
    }
    SignalPanel::new(first.dates.clone(), first.assets.clone(), signals, values)
}

/// Equal-weighted average of the `M` signal blocks of a stacked vector,
/// rescaled to unit gross exposure (zero stays zero).
pub fn blend_equal(x: &DVector<f64>, n_assets: usize) -> DVector<f64> {
    let m = x.len() / n_assets;
    let mut avg = DVector::zeros(n_assets);
    for b in 0..m {
        avg += x.rows(b * n_assets, n_assets);
    }
    let gross: f64 = avg.iter().map(|v| v.abs()).sum();
    if gross == 0.0 {
        avg
    } else {
        avg / gross
    }
}
