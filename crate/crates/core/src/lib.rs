//! Canonical portfolios.
//!
//! Dynamic portfolio selection where weights are linear in a vector of
//! predictive signals, `w_t = A' x_t`. The optimal coefficient matrix is
//! expressed through a canonical correlation analysis of the joint moments of
//! next-period returns and current signals, which reorganizes assets and
//! signals into uncorrelated long-short "canonical portfolios".
//!
//! The crate is organized by pipeline stage:
//!
//! - [`data`]: French data library ingestion, block calendars, eligibility.
//! - [`signals`]: cross-sectional momentum signals.
//! - [`moments`]: sample moments, linear shrinkage, symmetric matrix roots.
//! - [`cca`]: regularized adjusted cross-covariance and its SVD.
//! - [`policy`]: closed-form portfolio policies (CP, PP, MVO, UNI, REG, FI).
//! - [`backtest`]: walk-forward engine.
//! - [`analytics`]: performance and attribution statistics.
//! - [`montecarlo`]: synthetic Gaussian markets and estimator diagnostics.
//! - [`config`]: flat key-value run configuration.

pub mod analytics;
pub mod backtest;
pub mod cca;
pub mod config;
pub mod data;
pub mod error;
pub mod moments;
pub mod montecarlo;
pub mod policy;
pub mod signals;

pub use error::{Error, Result};
