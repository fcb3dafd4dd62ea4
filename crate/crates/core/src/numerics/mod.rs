//! Small dense linear-algebra kernel: pseudo-inverse and least squares,
//! eigenvalues of small matrices, Lyapunov/Riccati solves and the matrix
//! logarithm. Everything else in the crate builds on these.

mod care;
mod decomp;
mod eigen;
mod matrix;

pub use care::{care_residual, logm, solve_care, solve_lyapunov, sqrtm};
pub use decomp::{
    inverse, least_squares, penrose_residual, pseudo_inverse, range_basis, solve, thin_svd, Lu,
    ThinSvd, DEFAULT_PINV_TOLERANCE,
};
pub use eigen::{
    eigenvalues, min_symmetric_eigenvalue, spectral_abscissa, symmetric_eigenvalues, EigenSet,
    MAX_EIGEN_DIM,
};
pub use matrix::{dot, format_float, norm2, Matrix};
