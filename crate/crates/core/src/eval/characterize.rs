use serde::{Deserialize, Serialize};

use super::overlap::{dice_slices, dilate_mask, oracle_select};
use super::uncertainty::{
    ause, displacement_covariances, ece, gaussian_entropy, label_entropy, spearman,
    LabelProbabilities,
};
use crate::energy::RegistrationTarget;
use crate::sir::{weighting_pass_prepared, TemperatureState};
use crate::structured_gaussian::{component_rng, component_seed, StructuredGaussian};
use crate::tensor_grid::{jacobian_fold_fraction, warp_labels, DisplacementField, LabelVolume};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_l: usize,
    pub n_k: usize,
    pub ece_bins: usize,
    /// Dilation of each fixed structure that defines its ECE/AUSE region.
    pub dilation: usize,
    pub n_clusters: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_l: 1200,
            n_k: 80,
            ece_bins: 10,
            dilation: 3,
            n_clusters: 2,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_l == 0 || self.n_k == 0 || self.ece_bins == 0 || self.n_clusters == 0 {
            return Err(Error::InvalidConfig(
                "n_l, n_k, ece_bins and n_clusters must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Resampled posterior fields and their per-voxel summaries.
#[derive(Debug, Clone)]
pub struct PosteriorCharacterization {
    pub samples: Vec<DisplacementField>,
    /// Candidate index of each sample in the weighting pass.
    pub resampled: Vec<usize>,
    /// Normalised weight of each sample's candidate.
    pub sample_weights: Vec<f64>,
    pub label_probs: LabelProbabilities,
    /// Row-major `D x D` covariance per voxel, mm².
    pub covariances: Vec<Vec<f64>>,
    pub mean_field: DisplacementField,
    pub oracle_index: usize,
    pub ess: f64,
    pub nan_count: usize,
    pub temperature: TemperatureState,
}

/// One structure's row of the calibration report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub structure: u16,
    pub dsc_mu: f64,
    pub dsc_zbar: f64,
    pub dsc_oracle: f64,
    pub fold_mu: f64,
    pub fold_zbar: f64,
    pub fold_oracle: f64,
    pub ece: f64,
    pub ause_label: f64,
    pub ause_disp: f64,
    pub label_entropy: f64,
    pub disp_entropy: f64,
    /// Filled in across pairs by [`fill_spearman`].
    pub spearman_r: Option<f64>,
}

fn masked_mean(values: &[f64], mask: &[bool]) -> f64 {
    let (s, n) = values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Resampled posterior fields without any label-based summaries.
#[derive(Debug, Clone)]
pub struct PosteriorDraw {
    pub samples: Vec<DisplacementField>,
    pub resampled: Vec<usize>,
    pub sample_weights: Vec<f64>,
    pub ess: f64,
    pub nan_count: usize,
    pub temperature: TemperatureState,
}

/// Weighting pass over `n_l` candidates and resampling of `n_k` fields, with
/// the temperature frozen. A state that was never initialised takes its
/// spread from this pass, otherwise it is used as is.
pub fn draw_posterior(
    q: &StructuredGaussian,
    target: &RegistrationTarget<'_>,
    temperature: &TemperatureState,
    n_l: usize,
    n_k: usize,
    seed: u64,
) -> Result<PosteriorDraw> {
    let prep = q.prepare();
    let mut ens = weighting_pass_prepared(
        &prep,
        target,
        n_l,
        component_seed(seed, "characterize/noise"),
    )?;
    let mut temp = *temperature;
    let init = !temp.initialized;
    ens.temper(&mut temp, init)?;
    let mut rng = component_rng(seed, "characterize/resample", 0);
    ens.resample(n_k, &mut rng)?;

    let grid = *target.grid();
    let channels = target.channels();
    let samples = ens
        .resampled_samples(&prep)
        .into_iter()
        .map(|z| DisplacementField::new(grid, channels, z))
        .collect::<Result<Vec<_>>>()?;
    let sample_weights = ens.resampled.iter().map(|&i| ens.weights[i]).collect();
    Ok(PosteriorDraw {
        samples,
        resampled: ens.resampled.clone(),
        sample_weights,
        ess: ens.ess(),
        nan_count: ens.nan_count,
        temperature: temp,
    })
}

/// Weight, resample and summarise the posterior for one pair, then score every
/// structure of the fixed labels.
/// The temperature is handled as in [`draw_posterior`].
pub fn characterize(
    q: &StructuredGaussian,
    target: &RegistrationTarget<'_>,
    fixed_labels: &LabelVolume,
    moving_labels: &LabelVolume,
    temperature: &TemperatureState,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<(PosteriorCharacterization, Vec<CalibrationRow>)> {
    cfg.validate()?;
    let grid = *target.grid();
    grid.ensure_same(fixed_labels.grid())?;
    grid.ensure_same(moving_labels.grid())?;

    let draw = draw_posterior(q, target, temperature, cfg.n_l, cfg.n_k, seed)?;
    let samples = draw.samples;
    let channels = target.channels();

    let mut label_set = fixed_labels.structures();
    label_set.extend(moving_labels.structures());
    label_set.push(0);
    let label_probs = LabelProbabilities::from_samples(moving_labels, &samples, &label_set)?;
    let covariances = displacement_covariances(&samples)?;
    let lab_h = label_entropy(&label_probs);
    let disp_h: Vec<f64> = covariances.iter().map(|c| gaussian_entropy(c)).collect();

    let mu = DisplacementField::new(grid, channels, q.mean().to_vec())?;
    let zbar = DisplacementField::mean_of(&samples)?;
    let oracle_index = oracle_select(&samples, fixed_labels, moving_labels)?;
    let warp_mu = warp_labels(moving_labels, &mu)?;
    let warp_zbar = warp_labels(moving_labels, &zbar)?;
    let warp_oracle = warp_labels(moving_labels, &samples[oracle_index])?;
    let fold_mu = jacobian_fold_fraction(&mu);
    let fold_zbar = jacobian_fold_fraction(&zbar);
    let fold_oracle = jacobian_fold_fraction(&samples[oracle_index]);

    let fixed = fixed_labels.labels();
    let error: Vec<f64> = fixed
        .iter()
        .zip(warp_mu.labels())
        .map(|(a, b)| (a != b) as u8 as f64)
        .collect();

    let rows = fixed_labels
        .structures()
        .into_iter()
        .map(|s| {
            let region = dilate_mask(&fixed_labels.mask(s), &grid, cfg.dilation);
            let truth = fixed_labels.mask(s);
            CalibrationRow {
                structure: s,
                dsc_mu: dice_slices(fixed, warp_mu.labels(), s),
                dsc_zbar: dice_slices(fixed, warp_zbar.labels(), s),
                dsc_oracle: dice_slices(fixed, warp_oracle.labels(), s),
                fold_mu,
                fold_zbar,
                fold_oracle,
                ece: ece(&label_probs.of_label(s), &truth, &region, cfg.ece_bins),
                ause_label: ause(&lab_h, &error, &region),
                ause_disp: ause(&disp_h, &error, &region),
                label_entropy: masked_mean(&lab_h, &region),
                disp_entropy: masked_mean(&disp_h, &region),
                spearman_r: None,
            }
        })
        .collect();

    Ok((
        PosteriorCharacterization {
            samples,
            resampled: draw.resampled,
            sample_weights: draw.sample_weights,
            label_probs,
            covariances,
            mean_field: zbar,
            oracle_index,
            ess: draw.ess,
            nan_count: draw.nan_count,
            temperature: draw.temperature,
        },
        rows,
    ))
}

/// Per structure, the rank correlation between mean label entropy and
/// `DSC(mu)` across pairs, written into every row of that structure. Needs at
/// least two pairs containing the structure; otherwise left unset.
pub fn fill_spearman(pairs: &mut [Vec<CalibrationRow>]) {
    let mut structures: Vec<u16> = pairs.iter().flatten().map(|r| r.structure).collect();
    structures.sort_unstable();
    structures.dedup();
    for s in structures {
        let (xs, ys): (Vec<f64>, Vec<f64>) = pairs
            .iter()
            .flatten()
            .filter(|r| r.structure == s)
            .map(|r| (r.label_entropy, r.dsc_mu))
            .unzip();
        if xs.len() < 2 {
            continue;
        }
        let r = spearman(&xs, &ys);
        for row in pairs.iter_mut().flatten().filter(|r| r.structure == s) {
            row.spearman_r = Some(r);
        }
    }
}
