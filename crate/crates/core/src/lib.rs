//! Lookahead factor models for equity selection.
//!
//! The pipeline: [`ingest`] raw monthly fundamentals and market data into a
//! [`Panel`], build lagged [`features`], fit a [`forecast`] model for
//! fundamentals twelve months ahead, rank securities by EBIT/EV using current,
//! predicted or realized future EBIT ([`factor`]), and simulate the resulting
//! portfolio with trading frictions ([`backtest`], [`metrics`]). [`synth`]
//! generates seeded universes with known dynamics for end-to-end checks.

pub mod backtest;
pub mod calendar;
pub mod error;
pub mod factor;
pub mod features;
pub mod forecast;
pub mod ingest;
pub mod metrics;
pub mod panel;
pub mod synth;
pub mod types;

pub use calendar::MonthIndex;
pub use error::{Error, Result};
pub use panel::{Observation, Panel};
pub use types::{Fundamental, FundamentalVector, MarketRow, SecurityId, N_FUNDAMENTALS};
