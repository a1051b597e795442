//! Yearly road-casualty forecasting toolkit.
//!
//! The crate ingests the three exported yearly tables (collisions,
//! casualties, vehicles), cleanses and merges them, frames the series as
//! supervised lookback windows, trains stacked LSTM or self-regulating
//! LSTM models from scratch with backpropagation through time, fits
//! classical baselines, and emits machine-readable evaluation, trend, and
//! correlation reports.
//!
//! Module map:
//!
//! - [`numeric`] — activations, matrix/vector algebra, quantiles,
//!   correlation, and the seedable splitmix64 generator
//! - [`cells`] — LSTM / SR-LSTM parameters, single steps, stacked forward
//! - [`training`] — loss, BPTT gradients, finite-difference gradient
//!   checking, Adam, early stopping with best-weight restore
//! - [`dataprep`] — CSV cleansing, imputation, year-keyed merge, robust
//!   scaling, windowing, splits
//! - [`baselines`] — ordinary least squares, autoregression with
//!   differencing, Poisson rate model
//! - [`analysis`] — RMSE/MAE, yearly trend, vehicle-type correlations
//! - [`cli`] — the pipeline front end used by the `roadcast` binary
//!
//! All randomness flows from a single seed; subsystems derive child
//! generators by fixed labels, so runs are bit-reproducible.

pub mod analysis;
pub mod baselines;
pub mod cells;
pub mod cli;
pub mod dataprep;
pub mod error;
pub mod numeric;
pub mod training;

pub use error::{Error, Result};
