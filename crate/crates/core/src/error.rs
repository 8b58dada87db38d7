//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("tokenization error: {0}")]
    Tokenize(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("calibration infeasible for stratum {stratum}: need n >= {needed}, have {have}")]
    CalibrationInfeasible { stratum: String, needed: usize, have: usize },

    #[error("no calibration stratum for horizon {0}")]
    UncalibratedHorizon(u32),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("serialization error: {0}")]
    Serialize(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
