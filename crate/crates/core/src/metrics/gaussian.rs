use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-8;
const EIGEN_FLOOR: f64 = -1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Adds `eps·I` to the covariance.
    pub fn regularize(&mut self, eps: f64) {
        for i in 0..self.dim() {
            self.cov[(i, i)] += eps;
        }
    }
}

/// Sample mean and unbiased covariance of the rows of `features` (`N × d`).
pub fn fit_gaussian(features: &DMatrix<f64>) -> Result<GaussianStats> {
    let (n, d) = features.shape();
    if n < 2 {
        return Err(Error::InsufficientData(format!("{n} samples; a covariance needs at least 2")));
    }
    let mean = DVector::from_fn(d, |j, _| features.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| features[(i, j)] - mean[j]);
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    // The product is symmetric up to rounding; make it exact.
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(GaussianStats { mean, cov })
}

fn scale(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(1.0f64, |m, v| m.max(v.abs()))
}

/// Principal square root of a symmetric positive semi-definite matrix via
/// eigendecomposition. Eigenvalues down to `-1e-8` (relative to the largest
/// entry) are treated as zero; anything more negative, or asymmetry beyond
/// the same tolerance, is a contract violation.
pub fn matrix_sqrt_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::Contract(format!("matrix of shape {:?} is not square", a.shape())));
    }
    let s = scale(a);
    let asym = (a - a.transpose()).amax();
    if asym > SYMMETRY_TOL * s {
        return Err(Error::Contract(format!("matrix is not symmetric (max |A − Aᵀ| = {asym:e})")));
    }
    let eig = SymmetricEigen::new(a.clone());
    if let Some(&min) = eig.eigenvalues.iter().find(|&&l| l < EIGEN_FLOOR * s) {
        return Err(Error::Contract(format!("matrix is not positive semi-definite (eigenvalue {min:e})")));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// `tr sqrt(Σ1 Σ2)` through the symmetric form `sqrt(Σ1^½ Σ2 Σ1^½)`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let ra = matrix_sqrt_psd(a)?;
    let m = &ra * b * &ra;
    let m = (&m + m.transpose()) * 0.5;
    Ok(SymmetricEigen::new(m).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum())
}

/// `‖μ1 − μ2‖² + tr(Σ1 + Σ2 − 2·sqrt(Σ1 Σ2))` before clamping.
pub fn fid_unclamped(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.shape() != (a.dim(), a.dim()) || b.cov.shape() != (b.dim(), b.dim()) {
        return Err(Error::config(format!("Gaussian dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    Ok(diff + a.cov.trace() + b.cov.trace() - 2.0 * trace_sqrt_product(&a.cov, &b.cov)?)
}

/// Fréchet distance between two Gaussians, clamped at zero.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    Ok(fid_unclamped(a, b)?.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mean: &[f64], cov: DMatrix<f64>) -> GaussianStats {
        GaussianStats {
            mean: DVector::from_column_slice(mean),
            cov,
        }
    }

    #[test]
    fn fit_two_points() {
        let f = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 0.0]);
        let g = fit_gaussian(&f).unwrap();
        assert_eq!(g.mean.as_slice(), &[1.0, 0.0]);
        assert_eq!(g.cov, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
        let same = fit_gaussian(&DMatrix::from_element(4, 3, 0.7)).unwrap();
        assert!(same.cov.iter().all(|&v| v == 0.0));
        assert!(fit_gaussian(&DMatrix::from_element(1, 3, 0.7)).is_err());
    }

    #[test]
    fn sqrt_examples() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!((matrix_sqrt_psd(&i).unwrap() - &i).amax() < 1e-12);
        let d = DMatrix::from_diagonal(&DVector::from_column_slice(&[4.0, 9.0]));
        let r = matrix_sqrt_psd(&d).unwrap();
        assert!((r - DMatrix::from_diagonal(&DVector::from_column_slice(&[2.0, 3.0]))).amax() < 1e-12);
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let r = matrix_sqrt_psd(&a).unwrap();
        let (p, q) = ((3f64.sqrt() + 1.0) / 2.0, (3f64.sqrt() - 1.0) / 2.0);
        assert!((r[(0, 0)] - p).abs() < 1e-12 && (r[(0, 1)] - q).abs() < 1e-12);
        assert!((&r * &r - a).amax() < 1e-12);
    }

    #[test]
    fn sqrt_contract_errors() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(matrix_sqrt_psd(&asym), Err(Error::Contract(_))));
        let neg = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, -0.5]));
        assert!(matches!(matrix_sqrt_psd(&neg), Err(Error::Contract(_))));
        let tiny = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, -1e-10]));
        assert!(matrix_sqrt_psd(&tiny).is_ok());
    }

    #[test]
    fn fid_examples() {
        let a = stats(&[0.5, -1.0], DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]));
        assert!(fid(&a, &a).unwrap() < 1e-10);
        let one = |m: f64| stats(&[m], DMatrix::from_element(1, 1, 1.0));
        assert!((fid(&one(0.0), &one(1.0)).unwrap() - 1.0).abs() < 1e-12);
        let i = stats(&[0.0, 0.0], DMatrix::identity(2, 2));
        let four = stats(&[0.0, 0.0], DMatrix::identity(2, 2) * 4.0);
        assert!((fid(&i, &four).unwrap() - 2.0).abs() < 1e-12);
        assert!(fid(&i, &one(0.0)).is_err());
    }
}
