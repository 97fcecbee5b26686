//! Dense linear algebra for the small matrices used throughout the crate.

pub mod eig;
pub mod expm;
pub mod hqr;
pub mod matrix;
pub mod riccati;
pub mod solve;

pub use eig::{
    is_negative_definite, is_positive_definite, max_eigenvalue, min_eigenvalue, psd_project,
    sym_eig, sym_eig_warm, sym_norm2, SymEig, EPS_DEF,
};
pub use expm::{expm, zoh};
pub use hqr::{eigenvalues, spectral_radius};
pub use matrix::{dot, norm2, Matrix};
pub use riccati::{dare_gain, dare_residual, solve_dare};
pub use solve::{det, inverse, is_cholesky_pd, solve, Cholesky, Lu};
