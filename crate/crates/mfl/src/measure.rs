//! Empirical measures: uniform mixtures of point masses in `R^d`.
//!
//! The interaction term of every drift family is a convolution against
//! the running empirical measure of the particle cloud, so this type sits
//! in the hot path. Atoms are stored flat (`n * d`, atom-major) and the
//! first moment is cached at construction: mean-field drifts that only
//! touch the mean stay O(1) per evaluation.

use crate::error::{Error, Result};

/// A uniform empirical measure `(1/n) * sum_k delta_{y_k}` on `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    atoms: Vec<f64>,
    n: usize,
    d: usize,
    mean: Vec<f64>,
}

impl EmpiricalMeasure {
    /// Build from a flat atom buffer of length `n * d` (atom-major).
    pub fn from_atoms(atoms: Vec<f64>, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::Shape("empirical measure: dimension must be >= 1".into()));
        }
        if atoms.is_empty() {
            return Err(Error::Domain("empirical measure: atom list is empty".into()));
        }
        if atoms.len() % d != 0 {
            return Err(Error::Shape(format!(
                "empirical measure: buffer length {} is not a multiple of d = {}",
                atoms.len(),
                d
            )));
        }
        if let Some(pos) = atoms.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "empirical measure: non-finite entry at flat index {pos}"
            )));
        }
        let n = atoms.len() / d;
        let mut mean = vec![0.0; d];
        for atom in atoms.chunks_exact(d) {
            for (m, &v) in mean.iter_mut().zip(atom) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        Ok(EmpiricalMeasure { atoms, n, d, mean })
    }

    /// Build from a slice of scalar atoms (`d = 1`).
    pub fn from_scalar_atoms(atoms: &[f64]) -> Result<Self> {
        Self::from_atoms(atoms.to_vec(), 1)
    }

    pub fn n_atoms(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn atom(&self, k: usize) -> &[f64] {
        &self.atoms[k * self.d..(k + 1) * self.d]
    }

    pub fn atoms_flat(&self) -> &[f64] {
        &self.atoms
    }

    pub fn iter_atoms(&self) -> impl Iterator<Item = &[f64]> {
        self.atoms.chunks_exact(self.d)
    }

    /// Cached first moment, one entry per coordinate.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Mean of the first coordinate (the only moment the mean-field
    /// Ornstein-Uhlenbeck drift needs).
    pub fn mean_first(&self) -> f64 {
        self.mean[0]
    }

    /// `(1/n) * sum_k |y_k|^r` with the Euclidean norm.
    pub fn abs_moment(&self, r: f64) -> f64 {
        let mut acc = 0.0;
        for atom in self.iter_atoms() {
            let norm_sq: f64 = atom.iter().map(|v| v * v).sum();
            acc += norm_sq.sqrt().powf(r);
        }
        acc / self.n as f64
    }

    /// Second moment of the first coordinate.
    pub fn second_moment_first(&self) -> f64 {
        let mut acc = 0.0;
        for atom in self.iter_atoms() {
            acc += atom[0] * atom[0];
        }
        acc / self.n as f64
    }

    /// Variance of the first coordinate.
    pub fn variance_first(&self) -> f64 {
        self.second_moment_first() - self.mean[0] * self.mean[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(EmpiricalMeasure::from_atoms(vec![], 1).is_err());
        assert!(EmpiricalMeasure::from_atoms(vec![1.0, f64::NAN], 1).is_err());
        assert!(EmpiricalMeasure::from_atoms(vec![1.0, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn mean_and_moments() {
        let nu = EmpiricalMeasure::from_scalar_atoms(&[1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_relative_eq!(nu.mean_first(), 3.0);
        assert_relative_eq!(nu.second_moment_first(), (1.0 + 4.0 + 9.0 + 36.0) / 4.0);
        assert_relative_eq!(nu.variance_first(), 12.5 - 9.0);
        assert_relative_eq!(nu.abs_moment(1.0), 3.0);
    }

    #[test]
    fn multivariate_mean() {
        let nu = EmpiricalMeasure::from_atoms(vec![1.0, 0.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(nu.n_atoms(), 2);
        assert_relative_eq!(nu.mean()[0], 2.0);
        assert_relative_eq!(nu.mean()[1], 2.0);
        assert_relative_eq!(nu.abs_moment(2.0), (1.0 + 25.0) / 2.0);
    }

    #[test]
    fn mean_is_permutation_invariant() {
        let a = EmpiricalMeasure::from_scalar_atoms(&[0.5, -1.5, 2.5]).unwrap();
        let b = EmpiricalMeasure::from_scalar_atoms(&[2.5, 0.5, -1.5]).unwrap();
        assert_relative_eq!(a.mean_first(), b.mean_first());
        assert_relative_eq!(a.second_moment_first(), b.second_moment_first());
    }
}
