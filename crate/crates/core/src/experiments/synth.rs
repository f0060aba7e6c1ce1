//! Synthetic source/target data with injected mean-shift anomalies.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ar_correlation, psd_factor, CovarianceSpec, DataPair};

/// Shape and distribution of one synthetic draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub n_source: usize,
    pub n_target: usize,
    pub dim: usize,
    /// Offset added to every coordinate of an injected anomaly.
    pub delta: f64,
    /// Column correlation `ρ^|i-j|`; 0 gives independent coordinates.
    pub rho: f64,
    pub source_mean: f64,
    pub target_mean: f64,
    /// Fraction of rows per domain receiving the offset when `delta > 0`.
    pub inject_fraction: f64,
}

impl SynthParams {
    pub fn new(n_source: usize, n_target: usize, dim: usize, delta: f64, rho: f64) -> Self {
        Self {
            n_source,
            n_target,
            dim,
            delta,
            rho,
            source_mean: 0.0,
            target_mean: 2.0,
            inject_fraction: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_source == 0 || self.n_target < 2 || self.dim == 0 {
            return Err(Error::Data(format!(
                "synthetic sizes n_s = {}, n_t = {}, d = {} are too small",
                self.n_source, self.n_target, self.dim
            )));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::Data(format!("delta must be >= 0, got {}", self.delta)));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Data(format!("rho must lie in [0, 1), got {}", self.rho)));
        }
        Ok(())
    }

    pub fn covariance(&self) -> Result<CovarianceSpec> {
        if self.rho == 0.0 {
            Ok(CovarianceSpec::identity(self.n_source, self.n_target, self.dim))
        } else {
            CovarianceSpec::with_column_cov(
                self.n_source,
                self.n_target,
                ar_correlation(self.dim, self.rho),
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTrial {
    pub data: DataPair,
    pub spec: CovarianceSpec,
    pub source_labels: Vec<bool>,
    pub target_labels: Vec<bool>,
}

/// Rows per domain that receive the offset.
pub fn injected_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

pub fn gen_synthetic(params: &SynthParams, seed: u64) -> Result<SyntheticTrial> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = params.covariance()?;
    let factor = psd_factor("col_cov", spec.col_source.view())?;
    let d = params.dim;
    let noise = |n: usize, mean: f64, rng: &mut ChaCha8Rng| {
        Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(rng)).dot(&factor.t()) + mean
    };
    let mut source = noise(params.n_source, params.source_mean, &mut rng);
    let mut target = noise(params.n_target, params.target_mean, &mut rng);
    let inject = |x: &mut Array2<f64>, rng: &mut ChaCha8Rng| {
        let n = x.nrows();
        let mut labels = vec![false; n];
        if params.delta > 0.0 {
            for i in sample(rng, n, injected_count(params.inject_fraction, n)) {
                labels[i] = true;
                x.row_mut(i).mapv_inplace(|v| v + params.delta);
            }
        }
        labels
    };
    let source_labels = inject(&mut source, &mut rng);
    let target_labels = inject(&mut target, &mut rng);
    Ok(SyntheticTrial {
        data: DataPair::new(source, target)?,
        spec,
        source_labels,
        target_labels,
    })
}
