//! Residual human-factor extraction and attention-modulated forecasting.

pub mod config;
pub mod decompose;
pub mod error;
pub mod extractor;
pub mod fj;
pub mod forecaster;
pub mod grad;
pub mod harness;
pub mod pipeline;
pub mod selftest;
pub mod seed;
pub mod series;

pub use error::{ErrorKind, HintsError, Result};
