//! The private set-convolution encoder.
//!
//! Context outputs are clipped, smoothed onto a grid with a unit-amplitude
//! RBF to form a density and a signal channel, and each channel receives an
//! independent GP noise field whose covariance is the same RBF. The two
//! noise magnitudes come from [`setconv_noise_scales`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::accounting::{setconv_noise_scales, PrivacyBudget};
use crate::error::{Error, Result};
use crate::grid::{per_dim_factors, GridFactors, GridSpec};
use crate::kernel::{Rbf, StationaryKernel};

/// Context points beyond this many lengthscales from a grid node are
/// skipped; the basis function there is below 1e-31.
pub(crate) const TRUNCATION: f64 = 12.0;

/// Inclusive index range of grid nodes within `reach` of `x`, if any.
pub(crate) fn node_range(axis: &crate::grid::GridAxis, x: f64, reach: f64) -> Option<(usize, usize)> {
    let n = axis.count;
    let lo = ((x - reach - axis.origin) / axis.spacing).floor().max(0.0) as usize;
    let hi_f = ((x + reach - axis.origin) / axis.spacing).ceil();
    if hi_f < 0.0 || lo >= n {
        return None;
    }
    Some((lo, (hi_f as usize).min(n - 1)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ContextSet {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl ContextSet {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::shape(format!("{} context inputs but {} outputs", xs.len(), ys.len())));
        }
        if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
            return Err(Error::domain("context values must be finite"));
        }
        Ok(Self { xs, ys })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

/// Symmetric magnitude clipping `y·min(1, C/|y|)`. `C = ∞` is the identity.
pub fn clip(y: f64, c: f64) -> f64 {
    if y.abs() <= c {
        y
    } else {
        y.signum() * c
    }
}

pub(crate) fn single_axis(grid: &GridSpec) -> Result<crate::grid::GridAxis> {
    if grid.dims() != 1 {
        return Err(Error::shape("the encoder works on one-dimensional grids"));
    }
    Ok(grid.axes[0])
}

/// Density Σ ψ((x − x_n)/λ) and signal Σ y_n·ψ((x − x_n)/λ) at every grid
/// node, with ψ(u) = exp(−u²/2).
pub fn setconv_channels(context: &ContextSet, grid: &GridSpec, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (d, s, _, _) = channels_impl(context, grid, lambda, false)?;
    Ok((d, s))
}

/// Density, signal and their derivatives in λ, in that order.
pub type ChannelsWithGrad = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

/// Channels together with their derivatives in λ.
pub fn setconv_channels_with_grad(
    context: &ContextSet,
    grid: &GridSpec,
    lambda: f64,
) -> Result<ChannelsWithGrad> {
    channels_impl(context, grid, lambda, true)
}

fn channels_impl(
    context: &ContextSet,
    grid: &GridSpec,
    lambda: f64,
    with_grad: bool,
) -> Result<ChannelsWithGrad> {
    if !(lambda > 0.0) {
        return Err(Error::domain(format!("encoder lengthscale must be > 0, got {lambda}")));
    }
    if context.xs.len() != context.ys.len() {
        return Err(Error::shape("context inputs and outputs differ in length"));
    }
    let axis = single_axis(grid)?;
    let n = axis.count;
    let mut density = vec![0.0; n];
    let mut signal = vec![0.0; n];
    let (mut dd, mut ds) = if with_grad {
        (vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new())
    };
    let reach = TRUNCATION * lambda;
    let inv_l = 1.0 / lambda;
    for (&x, &y) in context.xs.iter().zip(&context.ys) {
        let Some((lo, hi)) = node_range(&axis, x, reach) else {
            continue;
        };
        for j in lo..=hi {
            let u = (axis.point(j) - x) * inv_l;
            let w = (-0.5 * u * u).exp();
            density[j] += w;
            signal[j] += y * w;
            if with_grad {
                // ∂ψ/∂λ = ψ·u²/λ
                let g = w * u * u * inv_l;
                dd[j] += g;
                ds[j] += y * g;
            }
        }
    }
    Ok((density, signal, dd, ds))
}

/// Which parts of the mechanism are active. Anything other than
/// [`EncoderFlags::ALL`] is only accepted in [`EncodeMode::Ablation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderFlags {
    pub enable_clip: bool,
    pub enable_density_noise: bool,
    pub enable_signal_noise: bool,
}

impl EncoderFlags {
    pub const ALL: Self = Self {
        enable_clip: true,
        enable_density_noise: true,
        enable_signal_noise: true,
    };
    pub const NONE: Self = Self {
        enable_clip: false,
        enable_density_noise: false,
        enable_signal_noise: false,
    };
    /// No clipping and no density noise.
    pub const SIGNAL_NOISE_ONLY: Self = Self {
        enable_clip: false,
        enable_density_noise: false,
        enable_signal_noise: true,
    };
}

impl Default for EncoderFlags {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodeMode {
    Deploy,
    Train,
    Ablation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedRepresentation {
    pub grid: GridSpec,
    pub density: Vec<f64>,
    pub signal: Vec<f64>,
    /// Noise standard deviations actually added (0 for a disabled channel).
    pub sigma_d: f64,
    pub sigma_s: f64,
    pub lengthscale: f64,
}

/// Cholesky factors of the λ-RBF on a grid, reusable across encodes that
/// share λ.
#[derive(Debug, Clone)]
pub struct EncoderNoise {
    pub lengthscale: f64,
    pub factors: GridFactors,
}

impl EncoderNoise {
    pub fn new(grid: &GridSpec, lengthscale: f64) -> Result<Self> {
        single_axis(grid)?;
        if !(lengthscale > 0.0) {
            return Err(Error::domain(format!("encoder lengthscale must be > 0, got {lengthscale}")));
        }
        let rbf = Rbf { lengthscale };
        Ok(Self {
            lengthscale,
            factors: per_dim_factors(grid, &[&rbf as &dyn StationaryKernel])?,
        })
    }

    /// Draws one unit-scale noise field on the grid.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        crate::grid::kronecker_sample(&self.factors, rng)
    }
}

/// Parameters of one encode call besides the data.
#[derive(Debug, Clone, Copy)]
pub struct EncodeRequest {
    pub budget: PrivacyBudget,
    pub clip: f64,
    pub t: f64,
    pub mode: EncodeMode,
    pub flags: EncoderFlags,
}

impl EncodeRequest {
    pub fn deploy(budget: PrivacyBudget, clip: f64, t: f64) -> Self {
        Self {
            budget,
            clip,
            t,
            mode: EncodeMode::Deploy,
            flags: EncoderFlags::ALL,
        }
    }

    /// Refuses disabled mechanism components or an unbounded clip outside
    /// ablation mode.
    pub fn validate(&self) -> Result<()> {
        if self.flags != EncoderFlags::ALL && self.mode != EncodeMode::Ablation {
            return Err(Error::Refused(format!(
                "mechanism components can only be disabled in ablation mode (mode {:?}, flags {:?})",
                self.mode, self.flags
            )));
        }
        if self.mode != EncodeMode::Ablation && !self.clip.is_finite() {
            return Err(Error::Refused("an unbounded clip threshold is only allowed in ablation mode".into()));
        }
        Ok(())
    }
}

/// Resolves the (σ_d, σ_s) that an encode with `request` would apply.
pub fn applied_noise_scales(request: &EncodeRequest) -> Result<(f64, f64)> {
    request.validate()?;
    let f = request.flags;
    if !f.enable_density_noise && !f.enable_signal_noise {
        return Ok((0.0, 0.0));
    }
    let scales = setconv_noise_scales(&request.budget, request.clip, request.t)?;
    Ok((
        if f.enable_density_noise { scales.sigma_d } else { 0.0 },
        if f.enable_signal_noise { scales.sigma_s } else { 0.0 },
    ))
}

/// Private encoding of a context set.
pub fn dp_encode<R: Rng + ?Sized>(
    context: &ContextSet,
    grid: &GridSpec,
    lambda: f64,
    request: &EncodeRequest,
    rng: &mut R,
) -> Result<EncodedRepresentation> {
    request.validate()?;
    let noise = EncoderNoise::new(grid, lambda)?;
    dp_encode_with(context, grid, &noise, request, rng)
}

/// As [`dp_encode`], reusing precomputed noise factors.
///
/// Both noise fields are always drawn (density first) so that the random
/// stream does not depend on which channels are enabled.
pub fn dp_encode_with<R: Rng + ?Sized>(
    context: &ContextSet,
    grid: &GridSpec,
    noise: &EncoderNoise,
    request: &EncodeRequest,
    rng: &mut R,
) -> Result<EncodedRepresentation> {
    let (sigma_d, sigma_s) = applied_noise_scales(request)?;
    if noise.factors.spec != *grid {
        return Err(Error::shape("noise factors were built for a different grid"));
    }
    let g_d = noise.sample(rng);
    let g_s = noise.sample(rng);
    let clip_at = if request.flags.enable_clip { request.clip } else { f64::INFINITY };
    encode_with_noise(context, grid, noise.lengthscale, clip_at, (sigma_d, sigma_s), (&g_d, &g_s))
}

/// Deterministic core of the encoder: clips at `clip_at`, builds the two
/// channels and adds `σ_d·g_d` and `σ_s·g_s` for supplied unit noise fields.
pub fn encode_with_noise(
    context: &ContextSet,
    grid: &GridSpec,
    lambda: f64,
    clip_at: f64,
    (sigma_d, sigma_s): (f64, f64),
    (g_d, g_s): (&[f64], &[f64]),
) -> Result<EncodedRepresentation> {
    let clipped;
    let ctx = if clip_at.is_finite() {
        clipped = ContextSet {
            xs: context.xs.clone(),
            ys: context.ys.iter().map(|&y| clip(y, clip_at)).collect(),
        };
        &clipped
    } else {
        context
    };
    let (mut density, mut signal) = setconv_channels(ctx, grid, lambda)?;
    if g_d.len() != density.len() || g_s.len() != signal.len() {
        return Err(Error::shape("noise fields do not match the grid"));
    }
    if sigma_d > 0.0 {
        density.iter_mut().zip(g_d).for_each(|(v, g)| *v += sigma_d * g);
    }
    if sigma_s > 0.0 {
        signal.iter_mut().zip(g_s).for_each(|(v, g)| *v += sigma_s * g);
    }
    Ok(EncodedRepresentation {
        grid: grid.clone(),
        density,
        signal,
        sigma_d,
        sigma_s,
        lengthscale: lambda,
    })
}

/// ‖a·k_{x1} − b·k_{x2}‖ in the RKHS of the unit-amplitude RBF with
/// lengthscale `lambda`.
pub fn rkhs_pair_diff(a: f64, x1: f64, b: f64, x2: f64, lambda: f64) -> f64 {
    let k = Rbf { lengthscale: lambda }.at(x1 - x2);
    (a * a - 2.0 * a * b * k + b * b).max(0.0).sqrt()
}

/// RKHS norm of Σ c_i·k_{z_i}, from the Gram form cᵀKc.
fn rkhs_norm(coeffs: &[f64], points: &[f64], lambda: f64) -> f64 {
    let rbf = Rbf { lengthscale: lambda };
    let mut sq = 0.0;
    for (i, (&ci, &zi)) in coeffs.iter().zip(points).enumerate() {
        sq += ci * ci;
        for (&cj, &zj) in coeffs[..i].iter().zip(points) {
            sq += 2.0 * ci * cj * rbf.at(zi - zj);
        }
    }
    sq.max(0.0).sqrt()
}

/// Randomised search for the largest channel differences between
/// neighbouring contexts (one point substituted), measured in the RKHS of
/// the encoder kernel.
///
/// Half of the trials draw both contexts at random with outputs clipped at
/// `clip`. The rest are adversarial and alternate between the extremal
/// configuration of each channel: the substituted points moved 100λ apart
/// (density), or left at almost the same input with outputs pinned to
/// `+clip` and `-clip` (signal). Returns the maximum density and signal
/// differences observed.
pub fn sensitivity_probe<R: Rng + ?Sized>(trials: usize, clip_at: f64, rng: &mut R) -> (f64, f64) {
    let mut max_d: f64 = 0.0;
    let mut max_s: f64 = 0.0;
    for trial in 0..trials {
        let lambda = rng.random_range(0.05..2.0);
        let m = rng.random_range(1..=8usize);
        let xs: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut ys: Vec<f64> = (0..m).map(|_| clip(rng.random_range(-4.0..4.0) * clip_at, clip_at)).collect();
        let swap = rng.random_range(0..m);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let (x_new, y_new) = match trial % 4 {
            1 => {
                ys[swap] = sign * clip_at;
                (xs[swap] + sign * 100.0 * lambda, -sign * clip_at)
            }
            3 => {
                ys[swap] = sign * clip_at;
                (xs[swap] + rng.random_range(-1e-4..1e-4) * lambda, -sign * clip_at)
            }
            _ if rng.random_bool(0.05) => (xs[swap], ys[swap]),
            _ => (
                rng.random_range(-3.0..3.0),
                clip(rng.random_range(-4.0..4.0) * clip_at, clip_at),
            ),
        };
        // Functions of the first context enter with +, the neighbour with −.
        let mut points = xs.clone();
        points.extend(xs.iter().enumerate().map(|(i, &x)| if i == swap { x_new } else { x }));
        let dens: Vec<f64> = (0..2 * m).map(|i| if i < m { 1.0 } else { -1.0 }).collect();
        let sig: Vec<f64> = (0..2 * m)
            .map(|i| {
                if i < m {
                    ys[i]
                } else if i - m == swap {
                    -y_new
                } else {
                    -ys[i - m]
                }
            })
            .collect();
        max_d = max_d.max(rkhs_norm(&dens, &points, lambda));
        max_s = max_s.max(rkhs_norm(&sig, &points, lambda));
    }
    (max_d, max_s)
}
