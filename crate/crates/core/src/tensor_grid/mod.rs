//! Grids, volumes, displacement fields, warping and folding diagnostics.

mod diff;
mod grid;
mod warp;

pub use diff::{jacobian_determinants, jacobian_fold_fraction, spatial_forward_diff, ForwardDiff};
pub use grid::{DisplacementField, Grid, LabelVolume, Volume};
pub use warp::{warp_gradient, warp_intensity, warp_labels};
pub(crate) use warp::warp_with_derivative;
