//! The structured Gaussian proposal `q(Z) = N(mu, R R^T + (L L^T)^-1)`.
//!
//! `L` is a sparse lower-triangular precision factor whose pattern follows the
//! voxel grid, `R` is a dense low-rank factor. Log-densities use the Woodbury
//! identity and the matrix determinant lemma, so nothing of size `n x n` is
//! ever formed.

mod factor;
mod gaussian;
mod noise;
mod pattern;

pub use factor::{sigmoid, softplus, softplus_inv, CholeskyFactor, LowerFactor};
pub use gaussian::{GaussianGrad, Prepared, StructuredGaussian};
pub use noise::{component_rng, component_seed, NoiseDraw, NoiseKey};
pub use pattern::{PatternSpec, SparsityPattern};
