//! Flat `key = value` configuration files for backtests and sweeps.
//!
//! ```text
//! # comments start with '#'
//! dataset = FF25
//! policy = cp2
//! signals = mom21, mom252
//! sweep.window_blocks = 60 | 120
//! ```
//!
//! Keys (all optional):
//!
//! | key | value |
//! |---|---|
//! | `dataset` | built-in name, URL or local CSV/zip path |
//! | `policy` | `cp2`, `cp-full-3`, `pp2`, `mvo`, `uni`, `reg`, `fi` |
//! | `policy_mode` | `approx` or `full` |
//! | `k`, `gamma` | canonical pairs kept, risk aversion |
//! | `signals` | comma list of `mom<days>` or bare lookbacks |
//! | `window_blocks`, `horizon_days`, `buffer_days`, `warmup_days` | integers |
//! | `start_date`, `end_date` | `YYYY-MM-DD` or `none` |
//! | `shrinkage_r`, `shrinkage_x` | `auto` or a fixed intensity in `[0, 1]` |
//! | `eig_floor_rel` | relative eigenvalue floor |
//! | `demean_returns`, `demean_signals`, `sign_align`, `keep_snapshots` | `true`/`false` |
//! | `cross_moment` | `centered` or `raw` |
//! | `seed` | integer |
//!
//! `sweep.<key> = a | b | c` adds a sweep axis; the sweep is the cartesian
//! product of all axes, applied on top of the plain keys.

use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use thiserror::Error;

use crate::backtest::BacktestConfig;
use crate::moments::{CrossMoment, ShrinkageMode};
use crate::policy::PolicyMode;
use crate::signals::SignalSpec;

pub const KEYS: &[&str] = &[
    "dataset",
    "policy",
    "policy_mode",
    "k",
    "gamma",
    "signals",
    "window_blocks",
    "horizon_days",
    "buffer_days",
    "warmup_days",
    "start_date",
    "end_date",
    "shrinkage_r",
    "shrinkage_x",
    "eig_floor_rel",
    "demean_returns",
    "demean_signals",
    "cross_moment",
    "sign_align",
    "keep_snapshots",
    "seed",
];

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{0}` given more than once")]
    DuplicateKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
}

/// `key=value` assignments of one sweep point and the resulting config.
pub type SweepCell = (Vec<(String, String)>, BacktestConfig);

/// Parsed file: plain assignments and sweep axes, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub entries: Vec<(String, String)>,
    pub sweeps: Vec<(String, Vec<String>)>,
}

fn check_key(key: &str) -> Result<(), ConfigError> {
    if KEYS.contains(&key) {
        Ok(())
    } else {
        Err(ConfigError::UnknownKey(key.to_string()))
    }
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut out = Self::default();
        let mut seen = Vec::<String>::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            if seen.contains(&key) {
                return Err(ConfigError::DuplicateKey(key));
            }
            seen.push(key.clone());
            match key.strip_prefix("sweep.") {
                Some(inner) => {
                    check_key(inner)?;
                    let values: Vec<String> =
                        value.split('|').map(|v| v.trim().to_string()).collect();
                    if values.iter().any(String::is_empty) {
                        return Err(invalid(&key, &value, "empty sweep value"));
                    }
                    out.sweeps.push((inner.to_string(), values));
                }
                None => {
                    check_key(&key)?;
                    out.entries.push((key, value));
                }
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Backtest config from the plain keys over the defaults. Sweep axes are ignored.
    pub fn to_backtest(&self) -> Result<BacktestConfig, ConfigError> {
        build(self.entries.iter())
    }

    /// One config per point of the cartesian product of the sweep axes, each
    /// paired with its `key=value` assignments. No axes gives the base config.
    pub fn expand_sweep(&self) -> Result<Vec<SweepCell>, ConfigError> {
        self.to_backtest()?;
        let mut points: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for (key, values) in &self.sweeps {
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push((key.clone(), v.clone()));
                        q
                    })
                })
                .collect();
        }
        points
            .into_iter()
            .map(|assign| {
                let plain = self
                    .entries
                    .iter()
                    .filter(|(k, _)| !assign.iter().any(|(a, _)| a == k));
                let cfg = build(plain.chain(assign.iter()))?;
                Ok((assign, cfg))
            })
            .collect()
    }
}

/// Applies `entries` to the defaults. `policy` goes first because it resets
/// `k` and `policy_mode`; explicit `policy_mode`, `k` and `gamma` go last.
fn build<'a>(
    entries: impl Iterator<Item = &'a (String, String)>,
) -> Result<BacktestConfig, ConfigError> {
    let rank = |k: &str| match k {
        "policy" => 0,
        "policy_mode" | "k" | "gamma" => 2,
        _ => 1,
    };
    let mut ordered: Vec<&(String, String)> = entries.collect();
    ordered.sort_by_key(|(k, _)| rank(k));
    let mut cfg = BacktestConfig::default();
    for (k, v) in ordered {
        apply(&mut cfg, k, v)?;
    }
    Ok(cfg)
}

fn invalid(key: &str, value: &str, reason: impl ToString) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: ToString,
{
    value.parse::<T>().map_err(|e| invalid(key, value, e))
}

fn flag(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(invalid(key, value, "expected true or false")),
    }
}

fn date(key: &str, value: &str) -> Result<Option<NaiveDate>, ConfigError> {
    if value.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    NaiveDate::parse_from_str(value, "%Y-%m-%d")
        .map(Some)
        .map_err(|e| invalid(key, value, e))
}

fn shrinkage(key: &str, value: &str) -> Result<ShrinkageMode, ConfigError> {
    if value.eq_ignore_ascii_case("auto") {
        return Ok(ShrinkageMode::Auto);
    }
    let d: f64 = num(key, value)?;
    if !(0.0..=1.0).contains(&d) {
        return Err(invalid(key, value, "intensity outside [0, 1]"));
    }
    Ok(ShrinkageMode::Fixed(d))
}

/// Parses `mom21, mom252` or `21, 252`.
pub fn parse_signals(value: &str) -> Result<Vec<SignalSpec>, ConfigError> {
    let specs = value
        .split(',')
        .map(|tok| {
            let tok = tok.trim().to_ascii_lowercase();
            let days = tok.strip_prefix("mom").unwrap_or(&tok);
            let days: usize = num("signals", days)?;
            let spec = SignalSpec::momentum(days);
            spec.validate().map_err(|e| invalid("signals", value, e))?;
            Ok(spec)
        })
        .collect::<Result<Vec<_>, ConfigError>>()?;
    if specs.is_empty() {
        return Err(invalid("signals", value, "no signals"));
    }
    Ok(specs)
}

/// Set one key on `cfg`.
pub fn apply(cfg: &mut BacktestConfig, key: &str, value: &str) -> Result<(), ConfigError> {
    match key {
        "dataset" => cfg.dataset = value.parse().map_err(|e| invalid(key, value, e))?,
        "policy" => {
            let gamma = cfg.policy.gamma;
            cfg.policy = value.parse().map_err(|e| invalid(key, value, e))?;
            cfg.policy.gamma = gamma;
        }
        "policy_mode" => {
            cfg.policy.mode = value
                .parse::<PolicyMode>()
                .map_err(|e| invalid(key, value, e))?
        }
        "k" => {
            let k: usize = num(key, value)?;
            if k == 0 {
                return Err(invalid(key, value, "k must be at least 1"));
            }
            cfg.policy.k = k;
        }
        "gamma" => {
            let g: f64 = num(key, value)?;
            if !(g > 0.0 && g.is_finite()) {
                return Err(invalid(key, value, "gamma must be positive"));
            }
            cfg.policy.gamma = g;
        }
        "signals" => cfg.signals = parse_signals(value)?,
        "window_blocks" => cfg.window_blocks = num(key, value)?,
        "horizon_days" => cfg.horizon_days = num(key, value)?,
        "buffer_days" => cfg.buffer_days = num(key, value)?,
        "warmup_days" => cfg.warmup_days = num(key, value)?,
        "start_date" => cfg.start_date = date(key, value)?,
        "end_date" => cfg.end_date = date(key, value)?,
        "shrinkage_r" => cfg.moments.shrinkage.mode_r = shrinkage(key, value)?,
        "shrinkage_x" => cfg.moments.shrinkage.mode_x = shrinkage(key, value)?,
        "eig_floor_rel" => cfg.moments.shrinkage.eig_floor_rel = num(key, value)?,
        "demean_returns" => cfg.moments.demean.returns = flag(key, value)?,
        "demean_signals" => cfg.moments.demean.signals = flag(key, value)?,
        "cross_moment" => {
            cfg.moments.cross_moment = match value.to_ascii_lowercase().as_str() {
                "centered" => CrossMoment::Centered,
                "raw" => CrossMoment::Raw,
                _ => return Err(invalid(key, value, "expected centered or raw")),
            }
        }
        "sign_align" => cfg.sign_align = flag(key, value)?,
        "keep_snapshots" => cfg.keep_snapshots = flag(key, value)?,
        "seed" => cfg.seed = num(key, value)?,
        _ => return Err(ConfigError::UnknownKey(key.to_string())),
    }
    Ok(())
}
