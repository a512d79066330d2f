//! Privacy calibration: conversion between Gaussian DP and (ε, δ)-DP,
//! composition, and noise multipliers for the Gaussian mechanism and the
//! three functional-mechanism accountants (classical, Rényi, GDP).
//!
//! All functions are pure and work in double precision. The standard normal
//! CDF is evaluated through `erfc`, and the subtraction inside the
//! GDP-to-DP conversion is done in log space so that `e^ε·Φ(·)` never
//! overflows before it cancels.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{Error, Result};

/// Lower end of the bracket searched by [`mu_from_budget`].
pub const MU_MIN: f64 = 1e-9;
/// Upper end of the bracket searched by [`mu_from_budget`]. Budgets that
/// need a larger μ (δ extremely close to 1) are reported as numerical errors.
pub const MU_MAX: f64 = 100.0;

const BISECTION_CAP: usize = 400;
const NEWTON_STEPS: usize = 3;

/// An (ε, δ) privacy budget with ε ≥ 0 and 0 < δ < 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    epsilon: f64,
    delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::domain(format!("epsilon must be finite and >= 0, got {epsilon}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::domain(format!("delta must lie in (0, 1), got {delta}")));
        }
        Ok(Self { epsilon, delta })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Shorthand for [`mu_from_budget`].
    pub fn mu(&self) -> Result<GdpParam> {
        mu_from_budget(self)
    }
}

/// The μ parameter of a μ-GDP guarantee (μ > 0).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct GdpParam(f64);

impl GdpParam {
    pub fn new(mu: f64) -> Result<Self> {
        if mu > 0.0 && mu.is_finite() {
            Ok(Self(mu))
        } else {
            Err(Error::domain(format!("mu must be finite and > 0, got {mu}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Squared RKHS sensitivities of the density and signal channels for a
/// kernel bounded by `kernel_bound` and outputs clipped at `clip`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityPair {
    pub delta_d_sq: f64,
    pub delta_s_sq: f64,
    pub clip: f64,
    pub kernel_bound: f64,
}

impl SensitivityPair {
    pub fn new(clip: f64, kernel_bound: f64) -> Result<Self> {
        if !(clip > 0.0) || !(kernel_bound > 0.0) {
            return Err(Error::domain("clip threshold and kernel bound must be > 0"));
        }
        Ok(Self {
            delta_d_sq: 2.0 * kernel_bound,
            delta_s_sq: 4.0 * clip * clip * kernel_bound,
            clip,
            kernel_bound,
        })
    }

    /// μ of releasing both noisy channels: √(Δ_s²/σ_s² + Δ_d²/σ_d²).
    pub fn composed_mu(&self, sigma_d: f64, sigma_s: f64) -> f64 {
        (self.delta_s_sq / (sigma_s * sigma_s) + self.delta_d_sq / (sigma_d * sigma_d)).sqrt()
    }
}

/// Noise standard deviations for the two encoder channels and the split
/// variable `t` that produced them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseScales {
    pub sigma_d: f64,
    pub sigma_s: f64,
    pub t: f64,
}

/// Standard normal CDF.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// ln Φ(z), accurate far into the lower tail.
pub fn ln_norm_cdf(z: f64) -> f64 {
    if z > -35.0 {
        norm_cdf(z).ln()
    } else {
        // Mills-ratio expansion; erfc underflows below this point.
        let z2 = z * z;
        let inv = 1.0 / z2;
        let series = 1.0 - inv + 3.0 * inv * inv - 15.0 * inv.powi(3) + 105.0 * inv.powi(4);
        -0.5 * z2 - (-z).ln() - 0.5 * (2.0 * PI).ln() + series.ln()
    }
}

/// δ(ε) = Φ(−ε/μ + μ/2) − e^ε·Φ(−ε/μ − μ/2): the tightest δ at which a
/// μ-GDP mechanism is (ε, δ)-DP.
pub fn delta_from_mu(mu: GdpParam, epsilon: f64) -> Result<f64> {
    if !(epsilon >= 0.0) {
        return Err(Error::domain(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let mu = mu.value();
    let a = -epsilon / mu + mu / 2.0;
    let b = -epsilon / mu - mu / 2.0;
    let ln_first = ln_norm_cdf(a);
    let ln_second = epsilon + ln_norm_cdf(b);
    let ratio = ln_second - ln_first;
    if ratio >= 0.0 || ln_first == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    // δ = Φ(a)·(1 − e^{ratio})
    let delta = ln_first.exp() * -ratio.exp_m1();
    // The exact value is below 1 but can round up to it.
    Ok(delta.clamp(0.0, 1.0 - f64::EPSILON / 2.0))
}

/// Inverts [`delta_from_mu`] in μ for the given ε.
///
/// The map μ ↦ δ(μ, ε) is strictly increasing with derivative
/// φ(−ε/μ + μ/2), so the root is bracketed on [`MU_MIN`], [`MU_MAX`],
/// located by bisection and polished with safeguarded Newton steps.
pub fn mu_from_budget(budget: &PrivacyBudget) -> Result<GdpParam> {
    let (eps, target) = (budget.epsilon, budget.delta);
    let f = |mu: f64| -> f64 {
        delta_from_mu(GdpParam(mu), eps).expect("epsilon validated by PrivacyBudget") - target
    };

    let (mut lo, mut hi) = (MU_MIN, MU_MAX);
    let (f_lo, f_hi) = (f(lo), f(hi));
    if f_lo > 0.0 {
        return Err(Error::Numerical(format!(
            "delta = {target:e} at epsilon = {eps} would need mu below {MU_MIN:e}"
        )));
    }
    if f_hi < 0.0 {
        return Err(Error::Numerical(format!(
            "delta = {target} at epsilon = {eps} would need mu above {MU_MAX}"
        )));
    }

    let mut iterations = 0;
    while hi - lo > 4.0 * f64::EPSILON * hi {
        iterations += 1;
        if iterations > BISECTION_CAP {
            return Err(Error::Numerical(format!(
                "bisection for mu did not converge (eps = {eps}, delta = {target})"
            )));
        }
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }

    let mut mu = 0.5 * (lo + hi);
    for _ in 0..NEWTON_STEPS {
        let slope = norm_pdf(-eps / mu + mu / 2.0);
        if slope <= 0.0 {
            break;
        }
        let next = mu - f(mu) / slope;
        if !(next >= lo && next <= hi) {
            break;
        }
        mu = next;
    }

    let residual = f(mu).abs();
    if residual > 1e-10 {
        return Err(Error::Numerical(format!(
            "mu root residual {residual:e} too large (eps = {eps}, delta = {target})"
        )));
    }
    GdpParam::new(mu)
}

/// Adaptive composition of GDP mechanisms: √(Σ μᵢ²). The empty composition
/// releases nothing and returns 0.
pub fn compose_gdp(mus: &[GdpParam]) -> f64 {
    mus.iter().map(|m| m.0 * m.0).sum::<f64>().sqrt()
}

/// Noise standard deviation Δ/μ of the Gaussian mechanism.
pub fn gaussian_mechanism_sigma(sensitivity: f64, mu: GdpParam) -> Result<f64> {
    check_sensitivity(sensitivity)?;
    Ok(sensitivity / mu.value())
}

/// Multiplier of the classical functional-mechanism bound,
/// (Δ/ε)·√(2 ln(2/δ)). Only proven for 0 < ε ≤ 1; larger ε is rejected.
pub fn classical_functional_sigma(sensitivity: f64, budget: &PrivacyBudget) -> Result<f64> {
    check_sensitivity(sensitivity)?;
    let eps = budget.epsilon;
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::domain(format!(
            "classical functional bound needs 0 < epsilon <= 1, got {eps}"
        )));
    }
    Ok(sensitivity / eps * (2.0 * (2.0 / budget.delta).ln()).sqrt())
}

/// ε of the Rényi-DP functional mechanism at order `alpha` after conversion
/// to (ε, δ): αΔ²/(2σ²) − ln δ/(α − 1).
pub fn rdp_epsilon(alpha: f64, sigma: f64, sensitivity: f64, delta: f64) -> f64 {
    alpha * sensitivity * sensitivity / (2.0 * sigma * sigma) - delta.ln() / (alpha - 1.0)
}

/// The order α* = √(−2σ² ln δ / Δ²) + 1 that minimises [`rdp_epsilon`].
pub fn rdp_optimal_order(sigma: f64, sensitivity: f64, delta: f64) -> f64 {
    (-2.0 * sigma * sigma * delta.ln() / (sensitivity * sensitivity)).sqrt() + 1.0
}

/// Smallest σ meeting the budget under the Rényi-DP functional mechanism:
/// the positive root of −εσ² + 2√(−Δ² ln δ / 2)·σ + Δ²/2 = 0.
pub fn rdp_functional_sigma(sensitivity: f64, budget: &PrivacyBudget) -> Result<f64> {
    check_sensitivity(sensitivity)?;
    let eps = budget.epsilon;
    if !(eps > 0.0) {
        return Err(Error::domain("Renyi accountant needs epsilon > 0"));
    }
    let b = (-sensitivity * sensitivity * budget.delta.ln() / 2.0).sqrt();
    Ok((b + (b * b + eps * sensitivity * sensitivity / 2.0).sqrt()) / eps)
}

/// Multiplier Δ/μ of the functional mechanism under GDP accounting.
pub fn gdp_functional_sigma(sensitivity: f64, budget: &PrivacyBudget) -> Result<f64> {
    check_sensitivity(sensitivity)?;
    let mu = mu_from_budget(budget)?;
    Ok(sensitivity / mu.value())
}

/// Encoder noise scales for a budget, clip threshold `clip` and split `t`,
/// assuming a unit-amplitude kernel.
pub fn setconv_noise_scales(budget: &PrivacyBudget, clip: f64, t: f64) -> Result<NoiseScales> {
    let mu = mu_from_budget(budget)?;
    noise_scales_for_mu(mu, clip, t)
}

/// σ_s² = 4C²/(tμ²), σ_d² = 2/((1 − t)μ²).
pub fn noise_scales_for_mu(mu: GdpParam, clip: f64, t: f64) -> Result<NoiseScales> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::domain(format!("t must lie in (0, 1), got {t}")));
    }
    if !(clip > 0.0) {
        return Err(Error::domain(format!("clip threshold must be > 0, got {clip}")));
    }
    let mu = mu.value();
    Ok(NoiseScales {
        sigma_s: 2.0 * clip / (t.sqrt() * mu),
        sigma_d: 2f64.sqrt() / ((1.0 - t).sqrt() * mu),
        t,
    })
}

/// μ of the naive alternative that releases `n_points` grid evaluations of
/// both channels with i.i.d. Gaussian noise of standard deviation `sigma`
/// (pointwise sensitivities 4C² and 1 for a unit-amplitude kernel).
pub fn naive_pointwise_mu(n_points: usize, clip: f64, sigma: f64) -> Result<f64> {
    if n_points == 0 {
        return Err(Error::domain("need at least one evaluation point"));
    }
    if !(sigma > 0.0) {
        return Err(Error::domain(format!("sigma must be > 0, got {sigma}")));
    }
    let per_point = 4.0 * clip * clip + 1.0;
    Ok((n_points as f64 * per_point / (sigma * sigma)).sqrt())
}

fn check_sensitivity(sensitivity: f64) -> Result<()> {
    if sensitivity >= 0.0 && sensitivity.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("sensitivity must be finite and >= 0, got {sensitivity}")))
    }
}
