//! Linear PCA, σ-PCA and ICA with known-ground-truth experiments.

pub mod checkpoint;
pub mod constraints;
pub mod datagen;
pub mod error;
pub mod experiments;
pub mod grad;
pub mod gradcheck;
pub mod ica;
pub mod linalg;
pub mod linear_pca;
pub mod metrics;
pub mod optim;
pub mod sigma_pca;
pub mod train;

pub use error::{Error, NanDiagnostic, Result};
pub use grad::GradResult;
pub use linalg::{DataMatrix, Mat, Vector};
