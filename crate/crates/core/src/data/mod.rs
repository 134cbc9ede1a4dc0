//! Return panels, block calendars and the walk-forward eligibility rule.

mod fetch;
mod french;

use std::fmt;
use std::ops::Range;
use std::path::PathBuf;
use std::str::FromStr;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fetch::{
    cache_dir_from_env, cache_entry_path, fetch_dataset, load_dataset, load_factors, sha256_hex,
    store_in_cache, FetchError, CACHE_ENV,
};
pub use french::{extract_csv_text, parse_french_daily, parse_french_factors};

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("{dataset}: expected {expected} columns, found {found}")]
    ColumnCountMismatch {
        dataset: String,
        expected: usize,
        found: usize,
    },
    #[error("malformed row {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("dates not strictly increasing at row {0}")]
    UnorderedDates(usize),
    #[error("invalid return {value} at row {row}, column {col}")]
    InvalidValue { row: usize, col: usize, value: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("block {block} ends at day {end} but the panel has {days} days")]
    IncompleteBlock {
        block: usize,
        end: usize,
        days: usize,
    },
    #[error("block length must be positive")]
    InvalidBlockLength,
    #[error("serialization: {0}")]
    Serialization(String),
    #[error("unknown dataset '{0}'")]
    UnknownDataset(String),
}

/// Simple (decimal) returns, one row per date and one column per asset.
/// Missing observations are stored as `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel {
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<String>,
    pub values: DMatrix<f64>,
}

impl ReturnPanel {
    pub fn new(
        dates: Vec<NaiveDate>,
        assets: Vec<String>,
        values: DMatrix<f64>,
    ) -> Result<Self, DataError> {
        check_shape(&dates, &assets, &values)?;
        for (r, c) in (0..values.nrows()).flat_map(|r| (0..values.ncols()).map(move |c| (r, c))) {
            let v = values[(r, c)];
            if !v.is_nan() && !(v.is_finite() && v > -1.0) {
                return Err(DataError::InvalidValue {
                    row: r,
                    col: c,
                    value: v,
                });
            }
        }
        Ok(Self {
            dates,
            assets,
            values,
        })
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.values[(row, col)].is_nan()
    }

    pub fn n_missing(&self) -> usize {
        self.values.iter().filter(|v| v.is_nan()).count()
    }

    /// Keep only the listed columns, in the given order.
    pub fn select_assets(&self, cols: &[usize]) -> Self {
        Self {
            dates: self.dates.clone(),
            assets: cols.iter().map(|&c| self.assets[c].clone()).collect(),
            values: self.values.select_columns(cols),
        }
    }

    /// Rows in `range`.
    pub fn slice_rows(&self, range: Range<usize>) -> Self {
        Self {
            dates: self.dates[range.clone()].to_vec(),
            assets: self.assets.clone(),
            values: self.values.rows(range.start, range.len()).into_owned(),
        }
    }

    pub fn to_csv_string(&self) -> Result<String, DataError> {
        write_panel_csv(&self.dates, &self.assets, &self.values)
    }

    pub fn from_csv_str(text: &str) -> Result<Self, DataError> {
        let (dates, assets, values) = read_panel_csv(text)?;
        Self::new(dates, assets, values)
    }

    pub fn to_json_string(&self) -> Result<String, DataError> {
        write_panel_json(&self.dates, &self.assets, &self.values)
    }

    pub fn from_json_str(text: &str) -> Result<Self, DataError> {
        let (dates, assets, values) = read_panel_json(text)?;
        Self::new(dates, assets, values)
    }
}

pub(crate) fn check_shape(
    dates: &[NaiveDate],
    columns: &[String],
    values: &DMatrix<f64>,
) -> Result<(), DataError> {
    if values.shape() != (dates.len(), columns.len()) {
        return Err(DataError::ShapeMismatch(format!(
            "values are {:?}, expected ({}, {})",
            values.shape(),
            dates.len(),
            columns.len()
        )));
    }
    if let Some(i) = dates.windows(2).position(|w| w[0] >= w[1]) {
        return Err(DataError::UnorderedDates(i + 1));
    }
    Ok(())
}

pub(crate) fn write_panel_csv(
    dates: &[NaiveDate],
    columns: &[String],
    values: &DMatrix<f64>,
) -> Result<String, DataError> {
    let ser = |e: csv::Error| DataError::Serialization(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["date".to_string()];
    header.extend(columns.iter().cloned());
    w.write_record(&header).map_err(ser)?;
    for (r, date) in dates.iter().enumerate() {
        let mut rec = vec![date.format("%Y-%m-%d").to_string()];
        rec.extend(values.row(r).iter().map(|v| {
            if v.is_nan() {
                String::new()
            } else {
                v.to_string()
            }
        }));
        w.write_record(&rec).map_err(ser)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| DataError::Serialization(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| DataError::Serialization(e.to_string()))
}

type PanelParts = (Vec<NaiveDate>, Vec<String>, DMatrix<f64>);

pub(crate) fn read_panel_csv(text: &str) -> Result<PanelParts, DataError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| DataError::MalformedHeader(e.to_string()))?
        .clone();
    if header.get(0) != Some("date") {
        return Err(DataError::MalformedHeader(
            "first column must be 'date'".into(),
        ));
    }
    let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut dates = Vec::new();
    let mut flat = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| DataError::MalformedRow {
            line,
            reason: e.to_string(),
        })?;
        if rec.len() != columns.len() + 1 {
            return Err(DataError::MalformedRow {
                line,
                reason: format!("{} fields, expected {}", rec.len(), columns.len() + 1),
            });
        }
        dates.push(
            parse_iso_date(&rec[0]).ok_or_else(|| DataError::MalformedRow {
                line,
                reason: format!("bad date '{}'", &rec[0]),
            })?,
        );
        for field in rec.iter().skip(1) {
            let v = if field.is_empty() {
                f64::NAN
            } else {
                field.parse::<f64>().map_err(|_| DataError::MalformedRow {
                    line,
                    reason: format!("bad number '{field}'"),
                })?
            };
            flat.push(v);
        }
    }
    let values = DMatrix::from_row_slice(dates.len(), columns.len(), &flat);
    Ok((dates, columns, values))
}

#[derive(Serialize, Deserialize)]
struct PanelJson {
    dates: Vec<NaiveDate>,
    columns: Vec<String>,
    values: Vec<Vec<Option<f64>>>,
}

pub(crate) fn write_panel_json(
    dates: &[NaiveDate],
    columns: &[String],
    values: &DMatrix<f64>,
) -> Result<String, DataError> {
    let doc = PanelJson {
        dates: dates.to_vec(),
        columns: columns.to_vec(),
        values: values
            .row_iter()
            .map(|row| row.iter().map(|v| (!v.is_nan()).then_some(*v)).collect())
            .collect(),
    };
    serde_json::to_string(&doc).map_err(|e| DataError::Serialization(e.to_string()))
}

pub(crate) fn read_panel_json(text: &str) -> Result<PanelParts, DataError> {
    let doc: PanelJson =
        serde_json::from_str(text).map_err(|e| DataError::Serialization(e.to_string()))?;
    let n = doc.columns.len();
    let mut flat = Vec::with_capacity(doc.dates.len() * n);
    for (line, row) in doc.values.iter().enumerate() {
        if row.len() != n {
            return Err(DataError::MalformedRow {
                line,
                reason: format!("{} values, expected {n}", row.len()),
            });
        }
        flat.extend(row.iter().map(|v| v.unwrap_or(f64::NAN)));
    }
    let values = DMatrix::from_row_slice(doc.values.len(), n, &flat);
    Ok((doc.dates, doc.columns, values))
}

fn parse_iso_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").ok()
}

/// Contiguous, non-overlapping blocks of `block_len` trading days starting at
/// day index `offset`. Trailing days that do not fill a block are dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockCalendar {
    pub block_len: usize,
    pub offset: usize,
    pub blocks: Vec<Range<usize>>,
}

impl BlockCalendar {
    pub fn new(n_days: usize, block_len: usize, offset: usize) -> Result<Self, DataError> {
        if block_len == 0 {
            return Err(DataError::InvalidBlockLength);
        }
        let n_blocks = n_days.saturating_sub(offset) / block_len;
        let blocks = (0..n_blocks)
            .map(|b| {
                let start = offset + b * block_len;
                start..start + block_len
            })
            .collect();
        Ok(Self {
            block_len,
            offset,
            blocks,
        })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// First day index of block `k`; for `k == len()` this is the day after
    /// the last complete block.
    pub fn block_start(&self, k: usize) -> usize {
        self.offset + k * self.block_len
    }

    /// Day range covered by blocks `from..to`, which may extend before day 0
    /// or past the calendar.
    fn day_span(&self, from: isize, to: isize) -> (isize, isize) {
        let len = self.block_len as isize;
        let off = self.offset as isize;
        (off + from * len, off + to * len)
    }
}

/// Compound daily returns within each block: `prod(1 + r) - 1`. A missing day
/// makes the block missing. Output dates are the last day of each block.
pub fn aggregate_to_blocks(
    panel: &ReturnPanel,
    cal: &BlockCalendar,
) -> Result<ReturnPanel, DataError> {
    let n = panel.n_assets();
    let mut values = DMatrix::zeros(cal.len(), n);
    let mut dates = Vec::with_capacity(cal.len());
    for (b, range) in cal.blocks.iter().enumerate() {
        if range.end > panel.n_dates() {
            return Err(DataError::IncompleteBlock {
                block: b,
                end: range.end,
                days: panel.n_dates(),
            });
        }
        dates.push(panel.dates[range.end - 1]);
        for c in 0..n {
            let gross: f64 = range.clone().map(|d| 1.0 + panel.values[(d, c)]).product();
            values[(b, c)] = gross - 1.0;
        }
    }
    Ok(ReturnPanel {
        dates,
        assets: panel.assets.clone(),
        values,
    })
}

/// Assets with no missing daily return over the `lookback_blocks` blocks before
/// block `block_k` and the `lookahead_blocks` blocks starting at it. Days that
/// fall outside the panel count as missing.
pub fn eligibility_mask(
    panel: &ReturnPanel,
    cal: &BlockCalendar,
    block_k: usize,
    lookback_blocks: usize,
    lookahead_blocks: usize,
) -> Vec<usize> {
    let k = block_k as isize;
    let (start, end) = cal.day_span(k - lookback_blocks as isize, k + lookahead_blocks as isize);
    if start < 0 || end > panel.n_dates() as isize {
        return Vec::new();
    }
    let rows = start as usize..end as usize;
    (0..panel.n_assets())
        .filter(|&c| rows.clone().all(|d| !panel.values[(d, c)].is_nan()))
        .collect()
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Url(String),
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DatasetId {
    pub name: String,
    pub source: DataSource,
    /// Required column count, if known.
    pub expected_columns: Option<usize>,
}

const FRENCH_FTP: &str = "https://mba.tuck.dartmouth.edu/pages/faculty/ken.french/ftp/";

const BUILTINS: &[(&str, &str, usize)] = &[
    ("FF25", "25_Portfolios_5x5_Daily_CSV.zip", 25),
    ("FF100", "100_Portfolios_10x10_Daily_CSV.zip", 100),
    ("ME_OP25", "25_Portfolios_ME_OP_5x5_daily_CSV.zip", 25),
    ("ME_OP100", "100_Portfolios_ME_OP_10x10_daily_CSV.zip", 100),
    ("ME_INV25", "25_Portfolios_ME_INV_5x5_daily_CSV.zip", 25),
    (
        "ME_INV100",
        "100_Portfolios_ME_INV_10x10_daily_CSV.zip",
        100,
    ),
    ("FF5F", "F-F_Research_Data_5_Factors_2x3_daily_CSV.zip", 5),
];

impl DatasetId {
    pub const BUILTIN_NAMES: [&'static str; 6] = [
        "FF25",
        "FF100",
        "ME_OP25",
        "ME_OP100",
        "ME_INV25",
        "ME_INV100",
    ];

    pub fn builtin(name: &str) -> Result<Self, DataError> {
        let upper = name.to_ascii_uppercase();
        BUILTINS
            .iter()
            .find(|(n, _, _)| *n == upper)
            .map(|(n, file, cols)| Self {
                name: n.to_string(),
                source: DataSource::Url(format!("{FRENCH_FTP}{file}")),
                expected_columns: Some(*cols),
            })
            .ok_or_else(|| DataError::UnknownDataset(name.to_string()))
    }

    /// The daily five-factor file (market, size, value, profitability, investment).
    pub fn factors() -> Self {
        Self::builtin("FF5F").expect("factor dataset is built in")
    }

    pub fn custom(name: impl Into<String>, source: DataSource) -> Self {
        Self {
            name: name.into(),
            source,
            expected_columns: None,
        }
    }

    pub fn is_builtin(&self) -> bool {
        BUILTINS.iter().any(|(n, _, _)| *n == self.name)
    }
}

impl FromStr for DatasetId {
    type Err = DataError;

    /// A built-in name, an `http(s)://` URL, or a local file path.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(id) = Self::builtin(s) {
            return Ok(id);
        }
        let stem = s
            .rsplit(['/', '\\'])
            .next()
            .unwrap_or(s)
            .trim_end_matches(".zip")
            .trim_end_matches(".csv")
            .trim_end_matches(".CSV")
            .to_string();
        if s.starts_with("http://") || s.starts_with("https://") {
            Ok(Self::custom(stem, DataSource::Url(s.to_string())))
        } else if s.contains('/') || s.contains('.') {
            Ok(Self::custom(stem, DataSource::Path(PathBuf::from(s))))
        } else {
            Err(DataError::UnknownDataset(s.to_string()))
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}
