//! Dense linear algebra used by the upcycling pipeline.

mod decomp;
mod matrix;
mod svd;

pub use decomp::{
    cholesky_escalating, cholesky_lower, effective_rank, jitter_schedule, pca_fit_transform,
    pseudoinverse, right_solve_lower, solve_lower, solve_lower_transpose, PcaFit,
    SpectralProfile,
};
pub use matrix::{cosine, dot, norm, DenseMatrix};
pub use svd::{svd_full, SvdFactors};
