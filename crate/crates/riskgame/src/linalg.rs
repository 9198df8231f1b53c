//! Small dense linear-algebra helpers shared across the crate.
//!
//! The model's Gram matrix ΣΣ' is positive definite by assumption; every
//! expression of the form (ΣΣ')⁻¹ M is evaluated through a stored Cholesky
//! factorization, never by forming the inverse.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use num_complex_reexport::Complex;

// nalgebra re-exports num_complex; alias it so we don't need a direct dep.
mod num_complex_reexport {
    pub use nalgebra::Complex;
}

use crate::error::{Error, Result};

/// Cholesky factor of a positive definite Gram matrix, with solve helpers.
#[derive(Clone, Debug)]
pub struct GramSolver {
    chol: Cholesky<f64, Dyn>,
    dim: usize,
}

impl GramSolver {
    pub fn new(gram: DMatrix<f64>) -> Result<Self> {
        let dim = gram.nrows();
        let chol = Cholesky::new(gram)
            .ok_or_else(|| Error::Singular("Gram matrix is not positive definite".into()))?;
        Ok(Self { chol, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Solves (ΣΣ') X = B.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }

    /// Solves (ΣΣ') x = b.
    pub fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let gram = m.transpose() * m;
    let eig = gram.symmetric_eigen();
    eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max).max(0.0).sqrt()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Eigenvalues of a general square matrix.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Eigen("matrix not square".into()));
    }
    let ev = m.clone().complex_eigenvalues();
    let out: Vec<Complex<f64>> = ev.iter().cloned().collect();
    if out.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Eigen("non-finite eigenvalue".into()));
    }
    Ok(out)
}

/// Symmetrizes in place: M <- (M + M') / 2.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Relative asymmetry ‖M - M'‖ / (1 + ‖M‖), spectral norms.
pub fn symmetry_residual(m: &DMatrix<f64>) -> f64 {
    let skew = m - m.transpose();
    spectral_norm(&skew) / (1.0 + spectral_norm(m))
}

/// Compensated (Neumaier) summation; deterministic for a fixed slice order.
pub fn compensated_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Sample mean and standard error of the mean (compensated sums).
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    assert!(n > 0, "mean of empty sample");
    let mean = compensated_sum(xs) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = compensated_sum(&sq) / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}
