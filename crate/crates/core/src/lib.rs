//! Invertible instance-normalization flows for forecasting under
//! distribution shift.
//!
//! A [`pipeline::Pipeline`] maps a lookback window through an invertible
//! transform, forecasts in the transformed space with a backbone, and maps
//! the forecast back. [`training::train`] fits the backbone on one slice of
//! the training windows and the transform on another, alternating updates.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod flow;
pub mod forecasters;
mod hash;
pub mod nn;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
pub use hash::{hash_f64s, sha256_hex};
