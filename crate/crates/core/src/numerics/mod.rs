//! Quadrature, bounded minimization and small dense linear algebra shared by
//! every other module.

mod linalg;
mod optimize;
mod quadrature;

pub use linalg::{
    matrix_rows, min_eigenvalue, pd_inverse, relative_frobenius, sym_psd_factor, symmetrize,
};
pub use optimize::{latin_hypercube, minimize_box, MinimizeOptions, Minimum};
pub use quadrature::{build_rule, gauss_legendre, integrate, integrate_matrix, QuadratureRule};

/// Quadrature nodes per dimension used unless a caller asks otherwise.
pub const DEFAULT_QUAD_ORDER: usize = 64;
