//! Constant diffusion coefficient σ and its derived matrices.
//!
//! The diffusion enters every likelihood formula only through
//! `c = σσᵀ`, its inverse, and the symmetric PSD root `c^{-1/2}`
//! (strong ellipticity keeps all three well-defined). The evaluation
//! methods accept `(t, x)` so the interface supports state dependence,
//! but only a constant matrix is implemented; the root is the symmetric
//! one from an eigendecomposition, which is canonical and reproducible.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct DiffusionSpec {
    d: usize,
    sigma: DMatrix<f64>,
    c: DMatrix<f64>,
    c_inv: DMatrix<f64>,
    c_inv_sqrt: DMatrix<f64>,
    /// Set when σ = s·Id: unlocks the scalar fast paths in the hot loops.
    scalar: Option<f64>,
}

impl DiffusionSpec {
    /// σ = Id in dimension d.
    pub fn identity(d: usize) -> Self {
        Self::scalar(d, 1.0).expect("unit diffusion is always valid")
    }

    /// σ = s·Id, s > 0.
    pub fn scalar(d: usize, s: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::Shape("diffusion: d must be >= 1".into()));
        }
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::Domain(format!("diffusion: scalar sigma must be positive and finite, got {s}")));
        }
        Ok(DiffusionSpec {
            d,
            sigma: DMatrix::identity(d, d) * s,
            c: DMatrix::identity(d, d) * (s * s),
            c_inv: DMatrix::identity(d, d) / (s * s),
            c_inv_sqrt: DMatrix::identity(d, d) / s,
            scalar: Some(s),
        })
    }

    /// General constant σ (square, with σσᵀ strictly positive definite).
    pub fn from_matrix(sigma: DMatrix<f64>) -> Result<Self> {
        let d = sigma.nrows();
        if d == 0 || sigma.ncols() != d {
            return Err(Error::Shape(format!(
                "diffusion: sigma must be square and nonempty, got {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("diffusion: non-finite sigma entry".into()));
        }
        let c = &sigma * sigma.transpose();
        let eig = c.clone().symmetric_eigen();
        let min_eig = eig.eigenvalues.min();
        if min_eig <= 1e-14 {
            return Err(Error::Domain(format!(
                "diffusion: c = sigma*sigma^T not strictly positive definite (min eigenvalue {min_eig:.3e})"
            )));
        }
        let inv_vals = DVector::from_iterator(d, eig.eigenvalues.iter().map(|&l| 1.0 / l));
        let inv_sqrt_vals = DVector::from_iterator(d, eig.eigenvalues.iter().map(|&l| 1.0 / l.sqrt()));
        let q = &eig.eigenvectors;
        let c_inv = q * DMatrix::from_diagonal(&inv_vals) * q.transpose();
        let c_inv_sqrt = q * DMatrix::from_diagonal(&inv_sqrt_vals) * q.transpose();
        // Invariant: c_inv_sqrt · c · c_inv_sqrtᵀ = Id to round-off.
        let probe = &c_inv_sqrt * &c * c_inv_sqrt.transpose();
        let err = (&probe - DMatrix::<f64>::identity(d, d)).norm();
        if err > 1e-12 * d as f64 {
            return Err(Error::Domain(format!(
                "diffusion: inverse-root reconstruction error {err:.3e} exceeds tolerance"
            )));
        }
        let scalar = if sigma == DMatrix::identity(d, d) * sigma[(0, 0)] && sigma[(0, 0)] > 0.0 {
            Some(sigma[(0, 0)])
        } else {
            None
        };
        Ok(DiffusionSpec { d, sigma, c, c_inv, c_inv_sqrt, scalar })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// σ at (t, x); constant in this implementation.
    pub fn sigma_at(&self, _t: f64, _x: &[f64]) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn c_inv(&self) -> &DMatrix<f64> {
        &self.c_inv
    }

    pub fn c_inv_sqrt(&self) -> &DMatrix<f64> {
        &self.c_inv_sqrt
    }

    /// s when σ = s·Id, else None.
    pub fn scalar_sigma(&self) -> Option<f64> {
        self.scalar
    }

    /// out ← c⁻¹ b (Girsanov weighting of a drift vector).
    #[inline]
    pub fn apply_c_inv(&self, b: &[f64], out: &mut [f64]) {
        if let Some(s) = self.scalar {
            let w = 1.0 / (s * s);
            for (o, &v) in out.iter_mut().zip(b) {
                *o = w * v;
            }
        } else {
            for (r, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, &v) in b.iter().enumerate() {
                    acc += self.c_inv[(r, k)] * v;
                }
                *o = acc;
            }
        }
    }

    /// Apply σ to an increment in place (`dz ← σ dz`).
    #[inline]
    pub fn apply_sigma(&self, dz: &mut [f64]) {
        if let Some(s) = self.scalar {
            for v in dz.iter_mut() {
                *v *= s;
            }
        } else {
            let z = DVector::from_column_slice(dz);
            let out = &self.sigma * z;
            dz.copy_from_slice(out.as_slice());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn scalar_spec_matrices() {
        let diff = DiffusionSpec::scalar(1, 2.0).unwrap();
        assert_relative_eq!(diff.c()[(0, 0)], 4.0);
        assert_relative_eq!(diff.c_inv()[(0, 0)], 0.25);
        assert_relative_eq!(diff.c_inv_sqrt()[(0, 0)], 0.5);
        assert_eq!(diff.scalar_sigma(), Some(2.0));
    }

    #[test]
    fn general_matrix_root_reconstructs_identity() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 0.8]);
        let diff = DiffusionSpec::from_matrix(sigma).unwrap();
        let probe = diff.c_inv_sqrt() * diff.c() * diff.c_inv_sqrt().transpose();
        let err = (&probe - DMatrix::<f64>::identity(2, 2)).norm();
        assert!(err <= 2e-12, "reconstruction error {err}");
        assert_eq!(diff.scalar_sigma(), None);
    }

    #[test]
    fn rejects_degenerate_sigma() {
        assert!(DiffusionSpec::scalar(1, 0.0).is_err());
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(DiffusionSpec::from_matrix(singular).is_err());
    }
}
