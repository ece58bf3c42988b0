//! Sequential conformal prediction intervals for time series.
//!
//! Residuals of an arbitrary point predictor are embedded into sliding
//! windows, a reweighted Nadaraya-Watson estimator gives their conditional
//! distribution at the current window, and the narrowest quantile band of
//! nominal mass `1 - alpha` is returned as the prediction interval.

pub mod bandwidth;
pub mod cli;
pub mod datagen;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod kernels;
pub mod pipeline;
pub mod predictor;
pub mod rng;
pub mod rnw;
pub mod window;

pub use error::{Error, Result};
pub use kernels::{KernelFamily, KernelSpec};
pub use pipeline::{IntervalResult, Pipeline, PipelineConfig, ResidualEngine};
pub use rnw::{fit_rnw, Reweighting, RnwFit};
