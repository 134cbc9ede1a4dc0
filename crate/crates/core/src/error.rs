use thiserror::Error;

use crate::analytics::AnalyticsError;
use crate::backtest::BacktestError;
use crate::cca::CcaError;
use crate::config::ConfigError;
use crate::data::{DataError, FetchError};
use crate::moments::MomentError;
use crate::montecarlo::MonteCarloError;
use crate::policy::PolicyError;
use crate::signals::SignalError;

/// Any error raised by the pipeline, tagged with the stage it came from.
#[derive(Debug, Error)]
pub enum Error {
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("fetch: {0}")]
    Fetch(#[from] FetchError),
    #[error("signals: {0}")]
    Signal(#[from] SignalError),
    #[error("moments: {0}")]
    Moment(#[from] MomentError),
    #[error("cca: {0}")]
    Cca(#[from] CcaError),
    #[error("policy: {0}")]
    Policy(#[from] PolicyError),
    #[error("backtest: {0}")]
    Backtest(#[from] BacktestError),
    #[error("analytics: {0}")]
    Analytics(#[from] AnalyticsError),
    #[error("montecarlo: {0}")]
    MonteCarlo(#[from] MonteCarloError),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
