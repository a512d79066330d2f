//! Exact GP sampling on regular grids for product kernels.
//!
//! A draw on an `N_1 × … × N_D` grid is obtained by applying one
//! `N_d × N_d` Cholesky factor along each axis of an array of i.i.d.
//! standard normals, so the dense `(ΠN_d)²` covariance is never formed.

use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::StationaryKernel;
use crate::linalg::cholesky_scaled;

/// Largest grid for which [`kronecker_reconstruction_check`] builds dense
/// matrices.
pub const RECONSTRUCTION_LIMIT: usize = 4096;

/// One axis of a regular grid: `origin + i·spacing` for `i < count`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub origin: f64,
    pub spacing: f64,
    pub count: usize,
}

impl GridAxis {
    pub fn new(origin: f64, spacing: f64, count: usize) -> Result<Self> {
        if !(spacing > 0.0) || count == 0 || !origin.is_finite() {
            return Err(Error::domain(format!(
                "grid axis needs spacing > 0 and count >= 1 (got {spacing}, {count})"
            )));
        }
        Ok(Self { origin, spacing, count })
    }

    #[inline]
    pub fn point(&self, i: usize) -> f64 {
        self.origin + i as f64 * self.spacing
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.point(i)).collect()
    }

    pub fn last(&self) -> f64 {
        self.point(self.count - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<GridAxis>,
}

impl GridSpec {
    pub fn new(axes: Vec<GridAxis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::domain("grid needs at least one axis"));
        }
        Ok(Self { axes })
    }

    pub fn one_d(origin: f64, spacing: f64, count: usize) -> Result<Self> {
        Ok(Self {
            axes: vec![GridAxis::new(origin, spacing, count)?],
        })
    }

    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.count).collect()
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    /// Parses `origin:spacing:count` per axis, axes separated by commas.
    fn from_str(s: &str) -> Result<Self> {
        let axes = s
            .split(',')
            .map(|part| {
                let fields: Vec<&str> = part.trim().split(':').collect();
                if fields.len() != 3 {
                    return Err(Error::domain(format!("bad grid axis '{part}', want origin:spacing:count")));
                }
                let bad = |what: &str| Error::domain(format!("bad {what} in grid axis '{part}'"));
                let origin: f64 = fields[0].parse().map_err(|_| bad("origin"))?;
                let spacing: f64 = fields[1].parse().map_err(|_| bad("spacing"))?;
                let count: usize = fields[2].parse().map_err(|_| bad("count"))?;
                GridAxis::new(origin, spacing, count)
            })
            .collect::<Result<Vec<_>>>()?;
        GridSpec::new(axes)
    }
}

/// All grid points in row-major order of the axis indices (last axis
/// fastest).
pub fn grid_points(spec: &GridSpec) -> Vec<Vec<f64>> {
    let shape = spec.shape();
    let total = spec.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..total {
        out.push(idx.iter().zip(&spec.axes).map(|(&i, a)| a.point(i)).collect());
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Per-axis Cholesky factors of a product kernel on a grid.
#[derive(Debug, Clone)]
pub struct GridFactors {
    pub spec: GridSpec,
    /// Row-major lower-triangular `L_d`, one per axis.
    factors: Vec<Vec<f64>>,
    /// Jitter that had to be added to each `K_d`.
    pub jitter: Vec<f64>,
}

impl GridFactors {
    pub fn factor(&self, axis: usize) -> DMatrix<f64> {
        let n = self.spec.axes[axis].count;
        DMatrix::from_row_slice(n, n, &self.factors[axis])
    }

    /// Covariance actually realised along one axis, `L_d·L_dᵀ`.
    pub fn realised_gram(&self, axis: usize) -> DMatrix<f64> {
        let l = self.factor(axis);
        &l * l.transpose()
    }

    /// Number of i.i.d. normals consumed per draw.
    pub fn len(&self) -> usize {
        self.spec.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spec.is_empty()
    }

    /// Turns a row-major array of standard normals into a field sample in
    /// place, applying the axis factors last axis first.
    pub fn apply(&self, field: &mut [f64]) -> Result<()> {
        let shape = self.spec.shape();
        if field.len() != self.spec.len() {
            return Err(Error::shape(format!(
                "noise array has {} entries, grid has {}",
                field.len(),
                self.spec.len()
            )));
        }
        let mut buf = Vec::new();
        for d in (0..shape.len()).rev() {
            let n = shape[d];
            let inner: usize = shape[d + 1..].iter().product();
            let outer: usize = shape[..d].iter().product();
            let l = &self.factors[d];
            buf.resize(inner, 0.0);
            for o in 0..outer {
                let block = &mut field[o * n * inner..(o + 1) * n * inner];
                // L is lower triangular, so rows can be overwritten bottom-up.
                for row in (0..n).rev() {
                    let lrow = &l[row * n..row * n + row + 1];
                    if inner == 1 {
                        let mut acc = 0.0;
                        for (m, &lv) in lrow.iter().enumerate() {
                            acc += lv * block[m];
                        }
                        block[row] = acc;
                    } else {
                        buf.iter_mut().for_each(|b| *b = 0.0);
                        for (m, &lv) in lrow.iter().enumerate() {
                            let src = &block[m * inner..(m + 1) * inner];
                            for (b, &s) in buf.iter_mut().zip(src) {
                                *b += lv * s;
                            }
                        }
                        block[row * inner..(row + 1) * inner].copy_from_slice(&buf);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Cholesky factor of `K_d[n][m] = k_d((n − m)·γ_d)` for every axis.
pub fn per_dim_factors(spec: &GridSpec, kernels: &[&dyn StationaryKernel]) -> Result<GridFactors> {
    if kernels.len() != spec.dims() {
        return Err(Error::shape(format!(
            "{} kernels for a {}-dimensional grid",
            kernels.len(),
            spec.dims()
        )));
    }
    let mut factors = Vec::with_capacity(spec.dims());
    let mut jitter = Vec::with_capacity(spec.dims());
    for (axis, kernel) in spec.axes.iter().zip(kernels) {
        let gram = axis_gram(axis, *kernel);
        let chol = cholesky_scaled(&gram, kernel.at(0.0))?;
        let l = chol.l();
        let n = axis.count;
        let mut flat = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                flat[i * n + j] = l[(i, j)];
            }
        }
        factors.push(flat);
        jitter.push(chol.jitter);
    }
    Ok(GridFactors {
        spec: spec.clone(),
        factors,
        jitter,
    })
}

fn axis_gram(axis: &GridAxis, kernel: &dyn StationaryKernel) -> DMatrix<f64> {
    let n = axis.count;
    // Entries depend only on the index offset, so the matrix is exactly
    // invariant to shifting the axis origin.
    let by_offset: Vec<f64> = (0..n).map(|k| kernel.at(k as f64 * axis.spacing)).collect();
    let by_neg: Vec<f64> = (0..n).map(|k| kernel.at(-(k as f64) * axis.spacing)).collect();
    DMatrix::from_fn(n, n, |i, j| if i >= j { by_offset[i - j] } else { by_neg[j - i] })
}

/// One field sample on the grid, row-major.
pub fn kronecker_sample<R: Rng + ?Sized>(factors: &GridFactors, rng: &mut R) -> Vec<f64> {
    let mut field: Vec<f64> = (0..factors.len()).map(|_| rng.sample(StandardNormal)).collect();
    factors.apply(&mut field).expect("length matches by construction");
    field
}

/// Dense verification of the product construction on a small grid.
///
/// Builds the sampler's linear map `M` column by column (by applying it to
/// unit vectors), compares it with the Kronecker product of the axis
/// factors, compares `M·Mᵀ` with the product kernel evaluated directly at
/// every pair of grid points, and compares `⊗_d K_d` with the same dense
/// covariance. Returns the largest absolute deviation seen.
pub fn kronecker_reconstruction_check(
    factors: &GridFactors,
    kernels: &[&dyn StationaryKernel],
) -> Result<f64> {
    let total = factors.len();
    if total > RECONSTRUCTION_LIMIT {
        return Err(Error::Refused(format!(
            "grid has {total} points; dense reconstruction is limited to {RECONSTRUCTION_LIMIT}"
        )));
    }
    if kernels.len() != factors.spec.dims() {
        return Err(Error::shape("one kernel per grid axis required"));
    }
    let points = grid_points(&factors.spec);
    let dense_cov = DMatrix::from_fn(total, total, |p, q| {
        kernels
            .iter()
            .enumerate()
            .map(|(d, k)| k.at(points[p][d] - points[q][d]))
            .product::<f64>()
    });

    let mut map = DMatrix::zeros(total, total);
    let mut unit = vec![0.0; total];
    for k in 0..total {
        unit.iter_mut().for_each(|v| *v = 0.0);
        unit[k] = 1.0;
        factors.apply(&mut unit)?;
        for p in 0..total {
            map[(p, k)] = unit[p];
        }
    }

    let mut kron_l = DMatrix::from_element(1, 1, 1.0);
    let mut kron_k = DMatrix::from_element(1, 1, 1.0);
    for (d, axis) in factors.spec.axes.iter().enumerate() {
        kron_l = kron_l.kronecker(&factors.factor(d));
        kron_k = kron_k.kronecker(&axis_gram(axis, kernels[d]));
    }

    let max_abs = |m: DMatrix<f64>| m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let map_dev = max_abs(&map - &kron_l);
    let cov_dev = max_abs(&map * map.transpose() - &dense_cov);
    let kron_dev = max_abs(kron_k - &dense_cov);
    Ok(map_dev.max(cov_dev).max(kron_dev))
}
