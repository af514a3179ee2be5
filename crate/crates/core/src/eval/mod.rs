//! Overlap, calibration and multi-modality metrics for sampled registrations.

mod characterize;
mod modes;
mod overlap;
mod uncertainty;

pub use characterize::{
    characterize, draw_posterior, fill_spearman, CalibrationRow, EvalConfig,
    PosteriorCharacterization, PosteriorDraw,
};
pub use modes::{analyze_modes, ModeAnalysis};
pub use overlap::{dice, dilate_mask, mean_dice, oracle_select};
pub use uncertainty::{
    ause, displacement_covariances, displacement_entropy, ece, gaussian_entropy, label_entropy,
    sparsification_gap, spearman, LabelProbabilities,
};
