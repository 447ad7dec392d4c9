//! Numeric substrate: matrices, random streams, MLPs, SGD, losses and
//! decompositions. Everything is `f64` and single-threaded per call so results
//! are bit-reproducible.

mod linalg;
mod loss;
mod matrix;
mod mlp;
mod rng;
mod sgd;

pub use linalg::{
    cholesky_solve, effective_rank, orthonormal_basis, rank_from_spectrum, singular_values,
    symmetric_eigen, DEFAULT_RANK_TOL,
};
pub use loss::{
    cosine_alignment, mean_row_cosine, per_sample_cross_entropy, softmax, softmax_cross_entropy,
};
pub use matrix::{abs_cosine, dot, norm, Matrix};
pub use mlp::{Activation, Activations, DenseLayer, LayerGrad, Mlp, MlpGrads};
pub use rng::RandomStream;
pub use sgd::{sgd_step, SgdConfig};
