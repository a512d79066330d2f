//! Reference predictors used to judge trained models: the exact GP
//! posterior, the observation-noise floor of sawtooth tasks and the Bayes
//! predictor for the signal-noise-only encoder.
//!
//! The last of these treats the encoder as a linear-Gaussian observation
//! of the context outputs. With `Ψ[j][n] = ψ((g_j − x_n)/λ)` the released
//! signal is `s = Ψ·y + σ_s·e`, where `y ~ N(0, K_ctx)` (observation noise
//! included) and `e` is the grid noise field. Targets `y*` are jointly
//! Gaussian with `y`, so
//!
//! ```text
//! cov(s)     = Ψ·K_ctx·Ψᵀ + σ_s²·K_grid
//! cov(s, y*) = Ψ·K(ctx, tgt)
//! E[y* | s]  = cov(s, y*)ᵀ·cov(s)⁻¹·s
//! ```
//!
//! `K_grid` is the covariance the sampler actually realises (`L·Lᵀ` of the
//! possibly jittered factor), so the predictor is exact for the mechanism
//! as implemented.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::accounting::{mu_from_budget, noise_scales_for_mu};
use crate::dpsetconv::{setconv_channels, ContextSet, EncoderNoise};
use crate::error::{Error, Result};
use crate::gp::{gaussian_nll, gp_posterior, GaussianPrediction};
use crate::grid::GridSpec;
use crate::kernel::{cov_matrix, cross_cov, KernelSpec};
use crate::linalg::cholesky_scaled;
use crate::model::NoiseDraw;
use crate::taskgen::{Task, TaskStream};

/// Mean target NLL of the exact GP posterior given the task's context.
pub fn gp_oracle_nll(spec: &KernelSpec, task: &Task) -> Result<f64> {
    gp_posterior(spec, &task.context.xs, &task.context.ys, &task.target_xs)?.mean_nll(&task.target_ys)
}

/// Mean target NLL of the context-free predictor `N(0, σ_v² + σ_n²)`.
pub fn prior_marginal_nll(spec: &KernelSpec, task: &Task) -> Result<f64> {
    let var = spec.marginal_variance();
    let mut total = 0.0;
    for &y in &task.target_ys {
        total += gaussian_nll(y, 0.0, var)?;
    }
    if task.target_ys.is_empty() {
        return Err(Error::domain("no targets to score"));
    }
    Ok(total / task.target_ys.len() as f64)
}

/// Expected NLL of a predictor that knows the noiseless sawtooth exactly:
/// `½·ln(2πσ_n²) + ½`.
pub fn sawtooth_floor_nll(sigma_n: f64) -> Result<f64> {
    if !(sigma_n > 0.0) || !sigma_n.is_finite() {
        return Err(Error::domain(format!("noise scale must be > 0, got {sigma_n}")));
    }
    Ok(0.5 * (2.0 * std::f64::consts::PI * sigma_n * sigma_n).ln() + 0.5)
}

/// Precomputed Bayes predictor for one context-input configuration.
#[derive(Debug, Clone)]
pub struct LowerBoundModel {
    /// `cov(s)⁻¹·cov(s, y*)`, one column per target.
    weights: DMatrix<f64>,
    variances: Vec<f64>,
    grid_len: usize,
}

impl LowerBoundModel {
    pub fn new(
        spec: &KernelSpec,
        context_xs: &[f64],
        noise: &EncoderNoise,
        sigma_s: f64,
        target_xs: &[f64],
    ) -> Result<Self> {
        if !(sigma_s >= 0.0) || !sigma_s.is_finite() {
            return Err(Error::domain(format!("sigma_s must be finite and >= 0, got {sigma_s}")));
        }
        let grid = &noise.factors.spec;
        let j = grid.len();
        let n = context_xs.len();
        let prior = spec.marginal_variance();
        if n == 0 && sigma_s == 0.0 {
            return Err(Error::domain("the signal carries no information and no noise"));
        }
        let psi = basis_matrix(context_xs, grid, noise.lengthscale)?;
        let mut cov_s = noise.factors.realised_gram(0) * (sigma_s * sigma_s);
        let mut cross = DMatrix::zeros(j, target_xs.len());
        if n > 0 {
            let k_ctx = cov_matrix(spec, context_xs, true);
            let psi_k = &psi * &k_ctx;
            cov_s += &psi_k * psi.transpose();
            cross = &psi * cross_cov(spec, context_xs, target_xs);
        }
        let scale = cov_s.diagonal().max().max(f64::MIN_POSITIVE);
        let chol = cholesky_scaled(&cov_s, scale)?;
        let weights = chol.solve(&cross);
        let variances = (0..target_xs.len())
            .map(|t| {
                let reduction = cross.column(t).dot(&weights.column(t));
                (prior - reduction).max(spec.noise_scale * spec.noise_scale).max(f64::MIN_POSITIVE)
            })
            .collect();
        Ok(Self {
            weights,
            variances,
            grid_len: j,
        })
    }

    pub fn predict(&self, signal: &[f64]) -> Result<GaussianPrediction> {
        if signal.len() != self.grid_len {
            return Err(Error::shape(format!(
                "signal has {} values, grid has {}",
                signal.len(),
                self.grid_len
            )));
        }
        let s = DVector::from_column_slice(signal);
        let means = self.weights.tr_mul(&s);
        Ok(GaussianPrediction {
            means: means.iter().copied().collect(),
            variances: self.variances.clone(),
        })
    }
}

/// `Ψ[j][n] = ψ((g_j − x_n)/λ)`, built with the encoder's own routine.
fn basis_matrix(context_xs: &[f64], grid: &GridSpec, lambda: f64) -> Result<DMatrix<f64>> {
    let j = grid.len();
    let mut psi = DMatrix::zeros(j, context_xs.len());
    for (n, &x) in context_xs.iter().enumerate() {
        let single = ContextSet {
            xs: vec![x],
            ys: vec![1.0],
        };
        let (density, _) = setconv_channels(&single, grid, lambda)?;
        psi.set_column(n, &DVector::from_vec(density));
    }
    Ok(psi)
}

/// Posterior of the targets given the released signal channel of a
/// signal-noise-only encoder with known context inputs.
pub fn lower_bound_predict(
    spec: &KernelSpec,
    context_xs: &[f64],
    signal: &[f64],
    lambda: f64,
    sigma_s: f64,
    grid: &GridSpec,
    target_xs: &[f64],
) -> Result<GaussianPrediction> {
    let noise = EncoderNoise::new(grid, lambda)?;
    LowerBoundModel::new(spec, context_xs, &noise, sigma_s, target_xs)?.predict(signal)
}

/// Where the signal-noise magnitude of each task comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SignalNoise {
    Fixed(f64),
    /// `σ_s` of the calibrated mechanism for the task's budget with the
    /// given clip threshold and split.
    FromBudget { clip: f64, t: f64 },
}

impl SignalNoise {
    pub fn sigma_for(&self, task: &Task) -> Result<f64> {
        match *self {
            SignalNoise::Fixed(s) => Ok(s),
            SignalNoise::FromBudget { clip, t } => {
                let mu = mu_from_budget(&task.budget)?;
                Ok(noise_scales_for_mu(mu, clip, t)?.sigma_s)
            }
        }
    }
}

/// Per-task mean NLL of the Bayes predictor for the signal-noise-only
/// encoder, averaged over `draws` noise draws per task.
///
/// Draw `r` of task `i` uses the same random stream as model evaluation
/// with seed `noise_seed + r`, so the first draw sees exactly the noise a
/// model evaluated with `noise_seed` sees.
pub fn lower_bound_task_nlls(
    spec_of: &(dyn Fn(&Task) -> Result<KernelSpec> + Sync),
    tasks: &[Task],
    lambda: f64,
    sigma: SignalNoise,
    grid: &GridSpec,
    draws: usize,
    noise_seed: u64,
) -> Result<Vec<f64>> {
    if draws == 0 {
        return Err(Error::domain("need at least one noise draw per task"));
    }
    let noise = EncoderNoise::new(grid, lambda)?;
    tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let spec = spec_of(task)?;
            let sigma_s = sigma.sigma_for(task)?;
            let model = LowerBoundModel::new(&spec, &task.context.xs, &noise, sigma_s, &task.target_xs)?;
            let (_, clean) = setconv_channels(&task.context, grid, lambda)?;
            let mut total = 0.0;
            for r in 0..draws {
                let mut rng = TaskStream::rng_for(noise_seed.wrapping_add(r as u64), i as u64);
                let draw = NoiseDraw::sample(&noise, &mut rng);
                let signal: Vec<f64> = clean.iter().zip(&draw.signal).map(|(c, g)| c + sigma_s * g).collect();
                total += model.predict(&signal)?.mean_nll(&task.target_ys)?;
            }
            Ok(total / draws as f64)
        })
        .collect()
}

/// Mean over tasks of [`lower_bound_task_nlls`].
pub fn lower_bound_nll(
    spec_of: &(dyn Fn(&Task) -> Result<KernelSpec> + Sync),
    tasks: &[Task],
    lambda: f64,
    sigma: SignalNoise,
    grid: &GridSpec,
    draws: usize,
    noise_seed: u64,
) -> Result<f64> {
    let per_task = lower_bound_task_nlls(spec_of, tasks, lambda, sigma, grid, draws, noise_seed)?;
    Ok(per_task.iter().sum::<f64>() / per_task.len().max(1) as f64)
}

/// The generating kernel recorded in a task, for GP tasks.
pub fn task_kernel(task: &Task) -> Result<KernelSpec> {
    task.meta
        .kernel()
        .ok_or_else(|| Error::domain("task does not record a GP kernel"))
}
