//! Gaussian-process sampling, exact posterior prediction and the Gaussian
//! negative log-likelihood.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{cov_matrix, cross_cov, KernelSpec};
use crate::linalg::cholesky_scaled;

/// Default trace tolerance (relative to σ_v²) of the low-rank sampler.
pub const LOWRANK_TOL: f64 = 1e-10;

/// Per-point Gaussian predictive distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrediction {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl GaussianPrediction {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// Mean negative log-likelihood of `ys` under the prediction.
    pub fn mean_nll(&self, ys: &[f64]) -> Result<f64> {
        if ys.len() != self.means.len() {
            return Err(Error::shape(format!(
                "{} targets scored against {} predictions",
                ys.len(),
                self.means.len()
            )));
        }
        if ys.is_empty() {
            return Err(Error::domain("no targets to score"));
        }
        let mut total = 0.0;
        for ((&y, &m), &v) in ys.iter().zip(&self.means).zip(&self.variances) {
            total += gaussian_nll(y, m, v)?;
        }
        Ok(total / ys.len() as f64)
    }
}

/// −ln N(y | mean, variance).
pub fn gaussian_nll(y: f64, mean: f64, variance: f64) -> Result<f64> {
    if !(variance > 0.0) {
        return Err(Error::domain(format!("variance must be > 0, got {variance}")));
    }
    let r = y - mean;
    Ok(0.5 * (2.0 * PI * variance).ln() + r * r / (2.0 * variance))
}

/// Draws noisy observations at `xs` from the GP prior by dense Cholesky of
/// the noise-inclusive covariance.
pub fn gp_sample<R: Rng + ?Sized>(spec: &KernelSpec, xs: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let z: Vec<f64> = (0..xs.len()).map(|_| rng.sample(StandardNormal)).collect();
    gp_sample_with_noise(spec, xs, &z)
}

/// `L·z` for the Cholesky factor `L` of the noise-inclusive covariance.
pub fn gp_sample_with_noise(spec: &KernelSpec, xs: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != xs.len() {
        return Err(Error::shape("noise vector length differs from input count"));
    }
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let k = cov_matrix(spec, xs, true);
    let chol = cholesky_scaled(&k, spec.signal_scale * spec.signal_scale)?;
    let y = chol.l() * DVector::from_column_slice(z);
    Ok(y.iter().copied().collect())
}

/// Draws noisy observations using a pivoted (low-rank) Cholesky factor of
/// the noise-free covariance, stopped once every residual diagonal entry is
/// below `tol·σ_v²`, followed by independent observation noise.
///
/// Cost is O(n·r²) for numerical rank r, which makes it the sampler of
/// choice for long task streams where n reaches a thousand points.
pub fn gp_sample_lowrank<R: Rng + ?Sized>(
    spec: &KernelSpec,
    xs: &[f64],
    tol: f64,
    rng: &mut R,
) -> Vec<f64> {
    let n = xs.len();
    let var = spec.signal_scale * spec.signal_scale;
    let threshold = tol * var;
    let mut diag = vec![var; n];
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut f = vec![0.0; n];
    while cols.len() < n {
        let (p, &dp) = diag
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("nonempty");
        if dp <= threshold {
            break;
        }
        let pivot = dp.sqrt();
        let mut col: Vec<f64> = xs.iter().map(|&x| spec.at_distance(x - xs[p])).collect();
        for prev in &cols {
            let scale = prev[p];
            if scale != 0.0 {
                for (c, &q) in col.iter_mut().zip(prev) {
                    *c -= scale * q;
                }
            }
        }
        for c in &mut col {
            *c /= pivot;
        }
        for (d, &c) in diag.iter_mut().zip(&col) {
            *d -= c * c;
        }
        diag[p] = 0.0;
        let z: f64 = rng.sample(StandardNormal);
        for (fi, &c) in f.iter_mut().zip(&col) {
            *fi += c * z;
        }
        cols.push(col);
    }
    for fi in &mut f {
        let e: f64 = rng.sample(StandardNormal);
        *fi += spec.noise_scale * e;
    }
    f
}

/// Exact GP regression conditional on noisy context observations.
/// Returned variances are for noisy observations (include σ_n²).
pub fn gp_posterior(
    spec: &KernelSpec,
    context_xs: &[f64],
    context_ys: &[f64],
    target_xs: &[f64],
) -> Result<GaussianPrediction> {
    if context_xs.len() != context_ys.len() {
        return Err(Error::shape("context inputs and outputs differ in length"));
    }
    let prior_var = spec.marginal_variance();
    if context_xs.is_empty() {
        return Ok(GaussianPrediction {
            means: vec![0.0; target_xs.len()],
            variances: vec![prior_var; target_xs.len()],
        });
    }
    let k = cov_matrix(spec, context_xs, true);
    let chol = cholesky_scaled(&k, spec.signal_scale * spec.signal_scale)?;
    let y = DMatrix::from_column_slice(context_ys.len(), 1, context_ys);
    let alpha = chol.solve(&y);
    let k_ct = cross_cov(spec, context_xs, target_xs);
    let means = k_ct.transpose() * &alpha;
    let v = chol.solve_lower(&k_ct);
    let variances = (0..target_xs.len())
        .map(|j| {
            let reduction: f64 = v.column(j).iter().map(|a| a * a).sum();
            (prior_var - reduction).max(f64::MIN_POSITIVE)
        })
        .collect();
    Ok(GaussianPrediction {
        means: means.iter().copied().collect(),
        variances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nll_examples() {
        assert!(gaussian_nll(0.0, 0.0, 1.0 / (2.0 * PI)).unwrap().abs() < 1e-15);
        let v = gaussian_nll(1.0, 0.0, 1.0).unwrap();
        assert!((v - 1.41894).abs() < 1e-5);
        assert!((v - (0.5 * (2.0 * PI).ln() + 0.5)).abs() < 1e-15);
        assert!(gaussian_nll(0.0, 0.0, 0.0).is_err());
        let at = gaussian_nll(0.3, 0.3, 0.5).unwrap();
        assert!(gaussian_nll(0.3, 0.31, 0.5).unwrap() > at);
        assert!(gaussian_nll(0.3, 0.29, 0.5).unwrap() > at);
    }

    #[test]
    fn sampling_basics() {
        let k = KernelSpec::eq(1.0, 1.0, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(gp_sample(&k, &[], &mut rng).unwrap().is_empty());
        let xs = [0.0, 0.5, 1.0];
        let a = gp_sample(&k, &xs, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = gp_sample(&k, &xs, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dense_sample_covariance_matches_kernel() {
        let k = KernelSpec::eq(0.8, 1.2, 0.3).unwrap();
        let xs = [-0.4, 0.1, 0.9];
        let kmat = cov_matrix(&k, &xs, true);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200_000;
        let mut prods: Vec<Vec<f64>> = (0..9).map(|_| Vec::with_capacity(n)).collect();
        for _ in 0..n {
            let y = gp_sample(&k, &xs, &mut rng).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    prods[i * 3 + j].push(y[i] * y[j]);
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let p = &prods[i * 3 + j];
                let m = p.iter().sum::<f64>() / n as f64;
                let sd = (p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt();
                let se = sd / (n as f64).sqrt();
                assert!((m - kmat[(i, j)]).abs() < 3.0 * se, "({i},{j}) {m} vs {}", kmat[(i, j)]);
            }
        }
    }

    #[test]
    fn lowrank_sampler_marginal_variance() {
        let k = KernelSpec::eq(1.0, 1.0, 0.2).unwrap();
        let xs: Vec<f64> = (0..64).map(|i| -3.0 + i as f64 * 0.1).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let probe = 17;
        let draws: Vec<f64> = (0..n)
            .map(|_| gp_sample_lowrank(&k, &xs, LOWRANK_TOL, &mut rng)[probe])
            .collect();
        let sq: Vec<f64> = draws.iter().map(|v| v * v).collect();
        let m = sq.iter().sum::<f64>() / n as f64;
        let sd = (sq.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((m - 1.04).abs() < 3.0 * sd / (n as f64).sqrt(), "{m}");
    }

    #[test]
    fn posterior_empty_context_is_prior() {
        let k = KernelSpec::eq(1.0, 1.3, 0.2).unwrap();
        let p = gp_posterior(&k, &[], &[], &[0.0, 1.0]).unwrap();
        assert_eq!(p.means, vec![0.0, 0.0]);
        assert!((p.variances[0] - (1.69 + 0.04)).abs() < 1e-15);
    }

    #[test]
    fn posterior_interpolates_without_noise() {
        let k = KernelSpec::eq(1.0, 1.0, 1e-6).unwrap();
        let p = gp_posterior(&k, &[0.0, 1.0], &[0.7, -0.2], &[0.0]).unwrap();
        assert!((p.means[0] - 0.7).abs() < 1e-6);
    }

    #[test]
    fn single_point_posterior_matches_closed_form() {
        let k = KernelSpec::eq(0.6, 1.1, 0.25).unwrap();
        let (x, y, t) = (0.3, 0.8, -0.1);
        let p = gp_posterior(&k, &[x], &[y], &[t]).unwrap();
        let kxt = k.at_distance(x - t);
        let kxx = k.marginal_variance();
        assert!((p.means[0] - kxt / kxx * y).abs() < 1e-10);
        assert!((p.variances[0] - (kxx - kxt * kxt / kxx)).abs() < 1e-10);
    }

    #[test]
    fn posterior_matches_dense_solve() {
        let k = KernelSpec::matern32(0.9, 1.0, 0.3).unwrap();
        let cx = [-1.2, -0.3, 0.2, 0.8, 1.9];
        let cy = [0.5, -0.1, 0.3, 1.1, -0.7];
        let tx = [-2.0, 0.0, 0.5, 3.0];
        let p = gp_posterior(&k, &cx, &cy, &tx).unwrap();
        // independent route: LU solve of the full system
        let kc = cov_matrix(&k, &cx, true);
        let lu = kc.clone().lu();
        for (j, &t) in tx.iter().enumerate() {
            let kt = DVector::from_iterator(5, cx.iter().map(|&c| k.at_distance(c - t)));
            let w = lu.solve(&kt).unwrap();
            let mean: f64 = w.iter().zip(&cy).map(|(a, b)| a * b).sum();
            let var = k.marginal_variance() - w.dot(&kt);
            assert!((p.means[j] - mean).abs() < 1e-8);
            assert!((p.variances[j] - var).abs() < 1e-8);
        }
    }
}
