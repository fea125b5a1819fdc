//! Dense real linear algebra used across the crate.
//!
//! Everything here is a pure function over immutable inputs and works in
//! `f64` regardless of how tensors are stored on disk.

mod cholesky;
mod eigen;
pub mod gemm;
mod matrix;
mod power;
mod stats;

pub use cholesky::{cholesky_logdet, logdet_auto, Cholesky, AUTO_RIDGE_FACTOR};
pub use eigen::{sym_eig, SpectralDecomposition, JACOBI_MAX_SWEEPS, JACOBI_TOL, SYMMETRY_TOL};
pub use matrix::DenseMatrix;
pub use power::{power_iteration_max_eig, power_iteration_trace};
pub use stats::{
    center_columns, covariance, cross_covariance, median, median_pairwise_sqdist,
    pairwise_sqdist,
};
pub(crate) use stats::median_upper_triangle;
