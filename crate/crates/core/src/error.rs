use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad input data, bad file, bad configuration.
    Validation,
    /// The trace does not carry what the requested policy needs.
    TraceContract,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite attention value {value} at layer {layer}, head {head}, index {index}")]
    NonFiniteAttention {
        layer: usize,
        head: usize,
        index: usize,
        value: f64,
    },
    #[error("negative attention value {value} at layer {layer}, head {head}, index {index}")]
    NegativeAttention {
        layer: usize,
        head: usize,
        index: usize,
        value: f64,
    },
    #[error("attention row for layer {layer}, head {head} sums to {sum}, above the sub-distribution bound")]
    AttentionMass { layer: usize, head: usize, sum: f64 },
    #[error("no grid layout declared; use the 1-D path")]
    NoGrid,
    #[error("format error: {0}")]
    Format(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("entropy undefined: visual mass of layer {layer} is zero")]
    ZeroMass { layer: usize },
    #[error("feature unavailable: {0}")]
    FeatureUnavailable(String),
    #[error("incomplete trace: candidate layer {layer} was not exported")]
    IncompleteTrace { layer: usize },
    #[error("trace contract violated: {0}")]
    TraceContract(String),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("bad magic bytes {0:?}, expected \"LSCD\"")]
    BadMagic([u8; 4]),
    #[error("unsupported trace format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated trace while reading {0}")]
    Truncated(String),
    #[error("step count mismatch: manifest declares {expected}, stream holds {found}")]
    StepCountMismatch { expected: usize, found: String },
    #[error("non-finite value in step {step}, field {field}, index {index}")]
    NonFinite {
        step: usize,
        field: &'static str,
        index: usize,
    },
    #[error("line {line}: {message}")]
    Fixture { line: usize, message: String },
    #[error("sizing error: {0}")]
    Sizing(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::IncompleteTrace { .. }
            | Error::TraceContract(_)
            | Error::FeatureUnavailable(_) => ErrorClass::TraceContract,
            _ => ErrorClass::Validation,
        }
    }
}
