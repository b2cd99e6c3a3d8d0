use mixar_autodiff::Tensor;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{contract, MixarError, Result};

/// Ridge added to both covariances before the square root.
pub const COV_RIDGE: f64 = 1e-12;

/// Sample mean and unbiased covariance of the rows.
pub fn gaussian_fit(x: &Tensor<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.shape();
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = DVector::from_iterator(d, (0..d).map(|j| m.column(j).mean()));
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0).max(1.0);
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
    if let Some(&v) = eig.eigenvalues.iter().find(|&&v| v < -1e-8 * scale) {
        return Err(MixarError::Numerical(format!("matrix is not positive semidefinite (eigenvalue {v:e})")));
    }
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// `||m1 - m2||^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2})`. The trace term is
/// computed as `tr(S1 + S2) - 2 tr((A S2 A)^{1/2})` with `A = S1^{1/2}`,
/// which keeps every square root symmetric.
pub fn frechet_distance(m1: &DVector<f64>, s1: &DMatrix<f64>, m2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let d = m1.len();
    if m2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(contract("Gaussian statistics have mismatched dimensions"));
    }
    let ridge = DMatrix::identity(d, d) * COV_RIDGE;
    let s1 = s1 + &ridge;
    let s2 = s2 + &ridge;
    let a = psd_sqrt(&s1)?;
    let inner = psd_sqrt(&(&a * &s2 * &a))?;
    let diff = m1 - m2;
    let value = diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * inner.trace();
    Ok(value.max(0.0))
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn frechet_surrogate(real: &Tensor<f64>, generated: &Tensor<f64>) -> Result<f64> {
    if real.rows() < 2 || generated.rows() < 2 {
        return Err(contract("the Fréchet surrogate needs at least two samples per side"));
    }
    if real.cols() != generated.cols() {
        return Err(contract(format!(
            "feature widths differ: {} vs {}",
            real.cols(),
            generated.cols()
        )));
    }
    let (m1, s1) = gaussian_fit(real);
    let (m2, s2) = gaussian_fit(generated);
    frechet_distance(&m1, &s1, &m2, &s2)
}
