//! Central finite-difference checks of analytic loss gradients.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;

use crate::energy::{EnergyConfig, LogTarget, RegistrationTarget};
use crate::sir::{elbo_loss, sir_loss, weighting_pass, WeightedEnsemble};
use crate::structured_gaussian::{
    component_rng, softplus_inv, CholeskyFactor, NoiseDraw, NoiseKey, PatternSpec,
    SparsityPattern, StructuredGaussian,
};
use crate::tensor_grid::{Grid, Volume};
use crate::Result;

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait GradProblem {
    fn params(&self) -> Vec<f64>;
    /// Named index sets that the report breaks errors down by.
    fn blocks(&self) -> Vec<(String, Vec<usize>)>;
    fn loss(&self, params: &[f64]) -> Result<f64>;
    fn loss_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockError {
    pub name: String,
    pub checked: usize,
    pub max_abs_err: f64,
    /// `max |analytic - fd| / max |fd|` over the checked entries.
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockError>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compare the analytic gradient with central differences of step `h`,
/// checking at most `max_per_block` evenly spaced entries of each block.
pub fn check_gradients<P: GradProblem + ?Sized>(
    problem: &P,
    h: f64,
    max_per_block: usize,
) -> Result<GradCheckReport> {
    let base = problem.params();
    let (_, grad) = problem.loss_and_grad(&base)?;
    let mut blocks = Vec::new();
    for (name, idx) in problem.blocks() {
        let stride = idx.len().div_ceil(max_per_block.max(1)).max(1);
        let mut max_abs = 0.0f64;
        let mut max_fd = 0.0f64;
        let mut max_an = 0.0f64;
        let mut checked = 0;
        let mut p = base.clone();
        for &i in idx.iter().step_by(stride) {
            p[i] = base[i] + h;
            let up = problem.loss(&p)?;
            p[i] = base[i] - h;
            let down = problem.loss(&p)?;
            p[i] = base[i];
            let fd = (up - down) / (2.0 * h);
            max_abs = max_abs.max((fd - grad[i]).abs());
            max_fd = max_fd.max(fd.abs());
            max_an = max_an.max(grad[i].abs());
            checked += 1;
        }
        let scale = max_fd.max(max_an);
        let rel = if scale > 0.0 { max_abs / scale } else { 0.0 };
        blocks.push(BlockError {
            name,
            checked,
            max_abs_err: max_abs,
            max_rel_err: rel,
        });
    }
    Ok(GradCheckReport { blocks })
}

/// Which training loss a [`LossProblem`] evaluates. Noise stays fixed while
/// parameters move, so samples follow the reparameterised path.
#[derive(Debug, Clone)]
pub enum LossKind {
    Sir(WeightedEnsemble),
    Elbo(Vec<NoiseDraw>),
}

/// A training loss seen as a function of the proposal parameters.
pub struct LossProblem<'a, T: LogTarget + ?Sized> {
    pub q: StructuredGaussian,
    pub target: &'a T,
    pub kind: LossKind,
    pub offdiag_l2: f64,
}

impl<T: LogTarget + ?Sized> LossProblem<'_, T> {
    fn with_params(&self, params: &[f64]) -> Result<StructuredGaussian> {
        let mut q = self.q.clone();
        q.set_params_flat(params)?;
        Ok(q)
    }
}

impl<T: LogTarget + ?Sized> GradProblem for LossProblem<'_, T> {
    fn params(&self) -> Vec<f64> {
        self.q.params_flat()
    }

    fn blocks(&self) -> Vec<(String, Vec<usize>)> {
        let n = self.q.dim();
        let pattern = self.q.pattern();
        let nnz = pattern.nnz();
        let diag = pattern.diag_mask();
        let raw_diag = (0..nnz).filter(|&e| diag[e]).map(|e| n + e).collect();
        let off_diag = (0..nnz).filter(|&e| !diag[e]).map(|e| n + e).collect();
        let lowrank = (n + nnz..self.q.num_params()).collect();
        vec![
            ("mu".into(), (0..n).collect()),
            ("raw_diag".into(), raw_diag),
            ("off_diag".into(), off_diag),
            ("lowrank".into(), lowrank),
        ]
    }

    fn loss(&self, params: &[f64]) -> Result<f64> {
        Ok(self.loss_and_grad(params)?.0)
    }

    fn loss_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let q = self.with_params(params)?;
        let (loss, grad) = match &self.kind {
            LossKind::Sir(ens) => sir_loss(&q, self.target, ens, self.offdiag_l2)?,
            LossKind::Elbo(draws) => elbo_loss(&q, self.target, draws, self.offdiag_l2)?,
        };
        Ok((loss.total, grad.to_flat()))
    }
}

/// A small registration problem with a randomly perturbed stencil proposal.
pub struct TinyInstance {
    pub fixed: Volume,
    pub moving: Volume,
    pub energy: EnergyConfig,
    pub q: StructuredGaussian,
    pub seed: u64,
}

/// `n`-cubed smooth image pair, window-3 NCC, stencil factor and rank-2 `R`.
pub fn tiny_registration_instance(n: usize, seed: u64) -> Result<TinyInstance> {
    let grid = Grid::new([n, n, n], [1.0; 3])?;
    let mut rng = component_rng(seed, "gradcheck/instance", 0);
    let ph: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let fixed = Volume::from_fn(grid, |[x, y, z]| {
        (0.7 * x as f64 + ph[0]).sin() + (0.6 * y as f64 + ph[1]).cos() * (0.5 * z as f64 + ph[2]).sin()
    });
    let moving = Volume::from_fn(grid, |[x, y, z]| {
        (0.65 * x as f64 + ph[3]).sin() + (0.55 * y as f64 + ph[4]).cos() * (0.45 * z as f64 + ph[5]).sin()
    });
    let energy = EnergyConfig {
        ncc_window: 3,
        ..Default::default()
    };

    let pattern = Arc::new(SparsityPattern::from_spec(grid, 3, PatternSpec::STENCIL));
    let dim = pattern.dim();
    let mut values = vec![0.0; pattern.nnz()];
    let diag = pattern.diag_mask();
    for (e, v) in values.iter_mut().enumerate() {
        *v = if diag[e] {
            softplus_inv(rng.random_range(2.0..4.0))
        } else {
            rng.random_range(-0.2..0.2)
        };
    }
    let chol = CholeskyFactor::from_raw(Arc::clone(&pattern), values)?;
    let mean = (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect();
    let lowrank = DMatrix::from_fn(dim, 2, |_, _| rng.random_range(-0.2..0.2));
    let q = StructuredGaussian::new(mean, chol, lowrank)?;
    Ok(TinyInstance {
        fixed,
        moving,
        energy,
        q,
        seed,
    })
}

impl TinyInstance {
    pub fn target(&self) -> Result<RegistrationTarget<'_>> {
        RegistrationTarget::new(&self.fixed, &self.moving, &self.energy)
    }

    /// Check the SIR loss (with a fixed 4-of-8 resampling) or the negative ELBO
    /// over two draws.
    pub fn check(&self, sir: bool, h: f64, max_per_block: usize) -> Result<GradCheckReport> {
        let target = self.target()?;
        let kind = if sir {
            let mut ens = weighting_pass(&self.q, &target, 8, self.seed)?;
            ens.resampled = vec![0, 3, 3, 7];
            LossKind::Sir(ens)
        } else {
            let (n, r) = (self.q.dim(), self.q.rank());
            LossKind::Elbo(
                (0..2)
                    .map(|i| NoiseDraw::generate(NoiseKey::new(self.seed, i), n, r))
                    .collect(),
            )
        };
        let problem = LossProblem {
            q: self.q.clone(),
            target: &target,
            kind,
            offdiag_l2: 0.05,
        };
        check_gradients(&problem, h, max_per_block)
    }
}
