//! Named scalar kernels and link functions.
//!
//! Interaction kernels (`f`, `g`) and link functions (`F`) are drawn from
//! a fixed registry of built-ins so that configuration files stay
//! declarative: a config names a kernel, it never supplies code. Links
//! carry their derivative because the score of the genuinely non-linear
//! family needs `F'`.

use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;

/// A named total function on `R`.
#[derive(Debug, Clone, Copy)]
pub struct Kernel {
    pub name: &'static str,
    f: fn(f64) -> f64,
}

impl Kernel {
    #[inline(always)]
    pub fn eval(&self, x: f64) -> f64 {
        (self.f)(x)
    }
}

/// A named total function on `R` together with its derivative.
#[derive(Debug, Clone, Copy)]
pub struct Link {
    pub name: &'static str,
    f: fn(f64) -> f64,
    df: fn(f64) -> f64,
}

impl Link {
    #[inline(always)]
    pub fn eval(&self, u: f64) -> f64 {
        (self.f)(u)
    }

    #[inline(always)]
    pub fn deriv(&self, u: f64) -> f64 {
        (self.df)(u)
    }
}

fn ident(x: f64) -> f64 {
    x
}
fn one(_: f64) -> f64 {
    1.0
}
fn zero(_: f64) -> f64 {
    0.0
}
fn gaussian_bump(x: f64) -> f64 {
    (-x * x).exp()
}
fn tanh_fn(x: f64) -> f64 {
    x.tanh()
}
fn sech_sq(x: f64) -> f64 {
    let t = x.tanh();
    1.0 - t * t
}

pub const KERNELS: &[Kernel] = &[
    Kernel { name: "identity", f: ident },
    Kernel { name: "gaussian_bump", f: gaussian_bump },
    Kernel { name: "tanh", f: tanh_fn },
    Kernel { name: "zero", f: zero },
    Kernel { name: "one", f: one },
];

pub const LINKS: &[Link] = &[
    Link { name: "identity", f: ident, df: one },
    Link { name: "tanh", f: tanh_fn, df: sech_sq },
];

pub fn kernel_by_name(name: &str) -> Result<Kernel> {
    KERNELS
        .iter()
        .find(|k| k.name == name)
        .copied()
        .ok_or_else(|| {
            Error::Domain(format!(
                "unknown kernel '{name}' (known: {})",
                KERNELS.iter().map(|k| k.name).collect::<Vec<_>>().join(", ")
            ))
        })
}

pub fn link_by_name(name: &str) -> Result<Link> {
    LINKS
        .iter()
        .find(|k| k.name == name)
        .copied()
        .ok_or_else(|| {
            Error::Domain(format!(
                "unknown link '{name}' (known: {})",
                LINKS.iter().map(|k| k.name).collect::<Vec<_>>().join(", ")
            ))
        })
}

/// Convolution of a scalar kernel against an empirical measure on `R`:
/// `(k ⋆ ν)(x) = (1/n) Σ_j k(x − y_j)`.
pub fn kernel_convolve(kernel: &Kernel, nu: &EmpiricalMeasure, x: f64) -> Result<f64> {
    if nu.dim() != 1 {
        return Err(Error::Shape(format!(
            "kernel_convolve: scalar kernel needs a 1-d measure, got d = {}",
            nu.dim()
        )));
    }
    let mut acc = 0.0;
    for atom in nu.iter_atoms() {
        acc += kernel.eval(x - atom[0]);
    }
    Ok(acc / nu.n_atoms() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn registry_lookup() {
        assert_eq!(kernel_by_name("identity").unwrap().eval(3.5), 3.5);
        assert_eq!(kernel_by_name("zero").unwrap().eval(-2.0), 0.0);
        assert!(kernel_by_name("cubic").is_err());
        assert!(link_by_name("identity").is_ok());
        assert!(link_by_name("sigmoid").is_err());
    }

    #[test]
    fn convolve_single_atom_is_shifted_kernel() {
        let k = kernel_by_name("gaussian_bump").unwrap();
        let nu = EmpiricalMeasure::from_scalar_atoms(&[0.75]).unwrap();
        assert_relative_eq!(
            kernel_convolve(&k, &nu, 2.0).unwrap(),
            (-(2.0f64 - 0.75).powi(2)).exp()
        );
    }

    #[test]
    fn convolve_two_point_average() {
        let k = kernel_by_name("gaussian_bump").unwrap();
        let nu = EmpiricalMeasure::from_scalar_atoms(&[-1.0, 1.0]).unwrap();
        assert_relative_eq!(kernel_convolve(&k, &nu, 0.0).unwrap(), (-1.0f64).exp());
    }

    #[test]
    fn convolve_zero_kernel() {
        let k = kernel_by_name("zero").unwrap();
        let nu = EmpiricalMeasure::from_scalar_atoms(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(kernel_convolve(&k, &nu, 5.0).unwrap(), 0.0);
    }

    #[test]
    fn convolve_rejects_multivariate_measure() {
        let k = kernel_by_name("identity").unwrap();
        let nu = EmpiricalMeasure::from_atoms(vec![0.0, 0.0], 2).unwrap();
        assert!(kernel_convolve(&k, &nu, 0.0).is_err());
    }

    #[test]
    fn tanh_link_derivative() {
        let l = link_by_name("tanh").unwrap();
        let u = 0.37;
        let h = 1e-6;
        let fd = (l.eval(u + h) - l.eval(u - h)) / (2.0 * h);
        assert_relative_eq!(l.deriv(u), fd, max_relative = 1e-8);
    }
}
