//! Dense linear algebra, seeded randomness and loss primitives.

mod decomp;
mod matrix;
mod ops;
mod rng;

pub use decomp::{
    householder_qr, orthonormal_row_basis, psd_cholesky, random_orthonormal, svd_compact, Svd,
};
pub use matrix::{axpy, dot, norm, Matrix};
pub use ops::{
    l2_normalize_rows, l2_normalize_rows_in_place, project_rows_to_nullspace,
    softmax_cross_entropy, NORM_EPS,
};
pub(crate) use ops::{remove_span, softmax_xent_into};
pub use rng::RngState;
