//! Dense Cholesky factorisation with a diagonal-jitter fallback.

use nalgebra::{DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// First jitter tried, relative to the matrix scale.
pub const JITTER_START: f64 = 1e-8;
/// Largest jitter tried before giving up.
pub const JITTER_MAX: f64 = 1e-4;

/// Lower-triangular factor of a (possibly jittered) symmetric matrix.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    inner: nalgebra::Cholesky<f64, Dyn>,
    /// Absolute amount added to the diagonal before factorising.
    pub jitter: f64,
}

impl CholeskyFactor {
    pub fn l(&self) -> DMatrix<f64> {
        self.inner.l()
    }

    pub fn dim(&self) -> usize {
        self.inner.l_dirty().nrows()
    }

    /// Solves (A + jitter·I) x = b.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.inner.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.inner.solve(b)
    }

    /// L⁻¹ b by forward substitution.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.inner
            .l()
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }
}

/// Factorises `matrix` with the jitter scale taken from its mean diagonal.
pub fn cholesky(matrix: &DMatrix<f64>) -> Result<CholeskyFactor> {
    let n = matrix.nrows();
    let scale = if n == 0 {
        1.0
    } else {
        matrix.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64
    };
    cholesky_scaled(matrix, scale)
}

/// Tries an exact factorisation first, then adds `JITTER_START·scale` to
/// the diagonal and escalates ×10 up to `JITTER_MAX·scale`.
pub fn cholesky_scaled(matrix: &DMatrix<f64>, scale: f64) -> Result<CholeskyFactor> {
    let n = matrix.nrows();
    if n != matrix.ncols() {
        return Err(Error::shape(format!("cholesky of a {}x{} matrix", n, matrix.ncols())));
    }
    if let Some(inner) = nalgebra::Cholesky::new(matrix.clone()) {
        return Ok(CholeskyFactor { inner, jitter: 0.0 });
    }
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let mut rel = JITTER_START;
    let mut jitter = 0.0;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        jitter = rel * scale;
        let mut m = matrix.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(inner) = nalgebra::Cholesky::new(m) {
            return Ok(CholeskyFactor { inner, jitter });
        }
        rel *= 10.0;
    }
    Err(Error::Factorisation { size: n, jitter })
}
