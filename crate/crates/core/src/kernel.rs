//! Covariance functions.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    /// Exponentiated quadratic.
    Eq,
    /// Matérn-3/2.
    Matern32,
}

/// A stationary covariance function plus i.i.d. observation noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub lengthscale: f64,
    pub signal_scale: f64,
    pub noise_scale: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, lengthscale: f64, signal_scale: f64, noise_scale: f64) -> Result<Self> {
        if !(lengthscale > 0.0) || !(signal_scale > 0.0) || !(noise_scale >= 0.0) {
            return Err(Error::domain(format!(
                "kernel needs lengthscale > 0, signal scale > 0, noise scale >= 0 \
                 (got {lengthscale}, {signal_scale}, {noise_scale})"
            )));
        }
        Ok(Self {
            family,
            lengthscale,
            signal_scale,
            noise_scale,
        })
    }

    pub fn eq(lengthscale: f64, signal_scale: f64, noise_scale: f64) -> Result<Self> {
        Self::new(KernelFamily::Eq, lengthscale, signal_scale, noise_scale)
    }

    pub fn matern32(lengthscale: f64, signal_scale: f64, noise_scale: f64) -> Result<Self> {
        Self::new(KernelFamily::Matern32, lengthscale, signal_scale, noise_scale)
    }

    /// Noise-free covariance at signed distance `r`.
    pub fn at_distance(&self, r: f64) -> f64 {
        let var = self.signal_scale * self.signal_scale;
        match self.family {
            KernelFamily::Eq => var * (-0.5 * r * r / (self.lengthscale * self.lengthscale)).exp(),
            KernelFamily::Matern32 => {
                let s = 3f64.sqrt() * r.abs() / self.lengthscale;
                var * (1.0 + s) * (-s).exp()
            }
        }
    }

    /// Prior variance of a noisy observation, σ_v² + σ_n².
    pub fn marginal_variance(&self) -> f64 {
        self.signal_scale * self.signal_scale + self.noise_scale * self.noise_scale
    }
}

/// k(x, x'), with σ_n² added when `include_noise` is set and x = x'.
pub fn kernel_eval(spec: &KernelSpec, x: f64, x_prime: f64, include_noise: bool) -> f64 {
    let mut k = spec.at_distance(x - x_prime);
    if include_noise && x == x_prime {
        k += spec.noise_scale * spec.noise_scale;
    }
    k
}

/// Covariance matrix of observations at `xs`. Noise goes on the index
/// diagonal, so repeated inputs are treated as separate noisy draws.
pub fn cov_matrix(spec: &KernelSpec, xs: &[f64], include_noise: bool) -> DMatrix<f64> {
    let n = xs.len();
    let noise = if include_noise { spec.noise_scale * spec.noise_scale } else { 0.0 };
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = spec.at_distance(0.0) + noise;
        for j in 0..i {
            let v = spec.at_distance(xs[i] - xs[j]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Noise-free cross covariance, rows indexed by `a`, columns by `b`.
pub fn cross_cov(spec: &KernelSpec, a: &[f64], b: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| spec.at_distance(a[i] - b[j]))
}

/// A stationary univariate kernel, evaluated at the signed difference of
/// its two arguments.
pub trait StationaryKernel {
    fn at(&self, diff: f64) -> f64;
}

impl StationaryKernel for KernelSpec {
    fn at(&self, diff: f64) -> f64 {
        self.at_distance(diff)
    }
}

impl<F: Fn(f64) -> f64> StationaryKernel for F {
    fn at(&self, diff: f64) -> f64 {
        self(diff)
    }
}

/// Unit-amplitude RBF exp(−d²/(2λ²)); the encoder basis function and the
/// covariance of the privacy noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rbf {
    pub lengthscale: f64,
}

impl StationaryKernel for Rbf {
    fn at(&self, diff: f64) -> f64 {
        let u = diff / self.lengthscale;
        (-0.5 * u * u).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eq_examples() {
        let k = KernelSpec::eq(1.0, 1.0, 0.3).unwrap();
        assert!((kernel_eval(&k, 0.4, 0.4, true) - 1.09).abs() < 1e-15);
        assert!((kernel_eval(&k, 0.0, 2f64.sqrt(), false) - (-1f64).exp()).abs() < 1e-15);
        // noise is only added at coincident points
        assert_eq!(kernel_eval(&k, 0.0, 1.0, true), kernel_eval(&k, 0.0, 1.0, false));
    }

    #[test]
    fn matern_examples() {
        let k = KernelSpec::matern32(0.7, 1.5, 0.2).unwrap();
        assert!((kernel_eval(&k, 1.0, 1.0, false) - 2.25).abs() < 1e-15);
        let r: f64 = 0.9;
        let s = 3f64.sqrt() * r / 0.7;
        let expected = 2.25 * (1.0 + s) * (-s).exp();
        assert!((kernel_eval(&k, 0.1, 1.0, false) - expected).abs() < 1e-15);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(KernelSpec::eq(0.0, 1.0, 0.1).is_err());
        assert!(KernelSpec::eq(1.0, 0.0, 0.1).is_err());
        assert!(KernelSpec::eq(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn matrices_are_symmetric_with_noise_on_diagonal() {
        let k = KernelSpec::eq(0.5, 1.0, 0.1).unwrap();
        let xs = [-1.0, 0.3, 0.3, 2.0];
        let m = cov_matrix(&k, &xs, true);
        for i in 0..4 {
            assert!((m[(i, i)] - 1.01).abs() < 1e-15);
            for j in 0..4 {
                assert!((m[(i, j)] - m[(j, i)]).abs() < 1e-12);
                if i != j {
                    assert!(m[(i, i)] > m[(i, j)]);
                }
            }
        }
    }
}
