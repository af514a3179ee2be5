//! Structured sampled-importance-resampling for probabilistic image registration.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor_grid`]: grids, volumes, displacement fields, warping and folding diagnostics.
//! - [`structured_gaussian`]: the proposal `N(mu, R R^T + (L L^T)^-1)` with a sparse
//!   lower-triangular precision factor `L` and a low-rank factor `R`.
//! - [`energy`]: the unnormalised registration posterior (local NCC likelihood plus
//!   diffusion prior) and its gradient.
//! - [`sir`]: weighting, tempering, resampling and the training losses.
//! - [`fit`]: per-pair optimisation of the proposal and a finite-difference gradient checker.
//! - [`eval`]: overlap, calibration and multi-modality metrics.
//! - [`io`]: the SVOL container, checkpoints, run configuration, synthetic data and reports.

pub mod energy;
pub mod error;
pub mod eval;
pub mod fit;
pub mod io;
pub mod sir;
pub mod structured_gaussian;
pub mod tensor_grid;

pub use error::{Error, Result};
