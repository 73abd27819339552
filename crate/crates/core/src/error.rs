use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Mat;

/// State captured when training meets a non-finite value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NanDiagnostic {
    pub epoch: usize,
    pub step: usize,
    /// Objective of the failing step (may itself be the non-finite value).
    pub loss: f64,
    pub grad_finite: bool,
    /// Weights before the failing update.
    pub weights: Mat,
}

/// Errors raised by the numerical routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("column {index} is degenerate (norm {norm:e})")]
    DegenerateColumn { index: usize, norm: f64 },
    #[error("matrix is rank deficient at column {0}")]
    RankDeficient(usize),
    #[error("component {0} has zero variance")]
    ZeroVariance(usize),
    #[error("non-finite values at epoch {}, step {}", .0.epoch, .0.step)]
    NonFinite(Box<NanDiagnostic>),
    #[error("i/o: {0}")]
    Io(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}

pub(crate) fn check_shape(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Shape(msg()))
    }
}
