//! Selective inference for anomalies flagged by an autoencoder that runs on
//! domain-adapted features.
//!
//! The pipeline: a piecewise-linear feature extractor maps source and target
//! rows into a shared representation, an autoencoder reconstructs them, and
//! the rows with the largest ℓ1 reconstruction errors are flagged. For each
//! flagged target row the crate computes a p-value conditional on that whole
//! selection, by tracing the data along a one-dimensional line and collecting
//! every stretch of the line on which the detector reproduces the observed
//! outcome.

pub mod engine;
pub mod error;
pub mod events;
pub mod experiments;
pub mod inference;
pub mod interval;
pub mod model;
pub mod network;
pub mod truncnorm;

pub use engine::{AffineTriple, Backend, Engine};
pub use error::{Error, Result};
pub use interval::{Interval, IntervalSet};
pub use model::{CovarianceSpec, DataPair};
pub use network::{Detection, ModelBundle, PiecewiseLinearNetwork};
