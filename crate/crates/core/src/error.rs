use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid covariance factor `{name}`: {reason}")]
    Covariance { name: &'static str, reason: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("bundle layer {index} ({network}): {reason}")]
    BundleLayer {
        network: &'static str,
        index: usize,
        reason: String,
    },

    #[error("bundle schema: {0}")]
    BundleSchema(String),

    #[error("anomaly rate {rate} too large for {n} instances")]
    Rate { rate: f64, n: usize },

    #[error("empty complement: every target row is flagged, the contrast is undefined")]
    EmptyComplement,

    #[error("activation pattern inconsistent at z = {z} (layer {layer}): interval became empty")]
    EmptyInterval { layer: usize, z: f64 },

    #[error("truncation region mass underflows (standardized bounds {bounds:?})")]
    MassUnderflow { bounds: Vec<(f64, f64)> },

    #[error("observed statistic {z_obs} is not inside the truncation region")]
    RegionMissesObserved { z_obs: f64 },

    #[error("csv: {0}")]
    Csv(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            actual,
        }
    }
}
