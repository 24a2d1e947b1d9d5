//! Numerical laboratory for exact neural-network Hessians.
//!
//! The crate assembles the Hessians of small feedforward networks in their
//! layerwise Kronecker-block form, measures exact and numerical ranks and
//! spectra through dense SVD, and evaluates the closed-form rank predictions
//! driven by layer widths, data covariance rank and residual covariance rank.
//!
//! Modules:
//! - [`linalg`]: dense matrix carrier, Kronecker products, SVD/eigen, rank.
//! - [`model`]: MLP definition, initialization, forward pass, gradients.
//! - [`data`]: datasets, moment matrices and preprocessing.
//! - [`hessian`]: analytic block assembly, Gauss-Newton, exact full Hessian,
//!   NTK Gram matrix.
//! - [`predict`]: closed-form rank formulas, bounds and spectral predictions.
//! - [`experiments`]: sweep runners, training traces and CSV reports.
//!
//! All core math is generic over the scalar; experiments run in `f64`
//! (the aliases below) which all rank tolerances assume.

pub mod data;
pub mod experiments;
pub mod hessian;
pub mod linalg;
pub mod model;
pub mod predict;
pub mod scalar;

pub use scalar::Scalar;

/// Default-precision matrix.
pub type Mat = linalg::Matrix<f64>;
/// Single-precision matrix (not used by the experiment suite).
pub type Mat32 = linalg::Matrix<f32>;

/// Crate-wide error, aggregating the per-module failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Hessian(#[from] hessian::HessianError),
    #[error(transparent)]
    Predict(#[from] predict::PredictError),
    #[error(transparent)]
    Experiment(#[from] experiments::ExperimentError),
}

impl Error {
    /// Process exit code classification: 2 config/input, 3 numerical, 4 cap.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Linalg(linalg::LinalgError::SvdNoConvergence)
            | Error::Linalg(linalg::LinalgError::EigNoConvergence) => 3,
            Error::Hessian(hessian::HessianError::CapExceeded { .. }) => 4,
            Error::Experiment(e) => e.exit_code(),
            Error::Hessian(hessian::HessianError::Linalg(e))
            | Error::Linalg(e) => match e {
                linalg::LinalgError::SvdNoConvergence | linalg::LinalgError::EigNoConvergence => 3,
                _ => 2,
            },
            _ => 2,
        }
    }
}
