//! Dense real-matrix kernels in `f64`: products, SVD, Cholesky, triangular
//! and LU solves, and a symmetric eigenvalue routine.

mod eigen;
mod factor;
mod matrix;
mod svd;

pub use eigen::sym_eigenvalues;
pub use factor::{cholesky_lower, inverse, solve_triangular, Lu, Side, TriSolve};
pub use matrix::Matrix;
pub use svd::{svd_full, truncation_error, SvdFactors};

