//! Genuinely non-linear family (p = 1, d = 1).
//!
//! ```text
//! b(θ; t, x, ν) = F(θ · (g ⋆ ν)(x))
//! ```
//!
//! The single parameter sits inside the link `F`, so neither the
//! likelihood equations nor the θ-gradient are linear:
//!
//! ```text
//! ∂_θ b = (g ⋆ ν)(x) · F′(θ · (g ⋆ ν)(x)).
//! ```
//!
//! θ is kept strictly positive (box in (0, ∞)) so that a strictly
//! monotone link keeps the parameter identifiable.

use std::sync::Arc;

use super::kernels::{kernel_by_name, link_by_name, Kernel, Link};
use super::{ConstraintViolation, DriftModel, ModelSpec, ParamBox};
use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;

#[derive(Debug)]
pub struct NonlinearF {
    bounds: ParamBox,
    link: Link,
    g: Kernel,
}

pub fn build(spec: &ModelSpec) -> Result<Arc<dyn DriftModel>> {
    if spec.d != 1 {
        return Err(Error::Shape(format!("nonlinear_f: d = {} unsupported (scalar family)", spec.d)));
    }
    let bounds = ParamBox::new(spec.lower.clone(), spec.upper.clone())?;
    if bounds.dim() != 1 {
        return Err(Error::Shape(format!("nonlinear_f: box dimension {} (need p = 1)", bounds.dim())));
    }
    if bounds.lower()[0] <= 0.0 {
        return Err(Error::Domain("nonlinear_f: box must lie in (0, inf)".into()));
    }
    let link = link_by_name(
        spec.link
            .as_deref()
            .ok_or_else(|| Error::config_msg("nonlinear_f: missing link"))?,
    )?;
    let g = kernel_by_name(
        spec.kernel_g
            .as_deref()
            .ok_or_else(|| Error::config_msg("nonlinear_f: missing kernel_g"))?,
    )?;
    Ok(Arc::new(NonlinearF { bounds, link, g }))
}

impl NonlinearF {
    #[inline]
    fn convolve_g(&self, x: f64, nu: &EmpiricalMeasure) -> f64 {
        let mut acc = 0.0;
        for atom in nu.iter_atoms() {
            acc += self.g.eval(x - atom[0]);
        }
        acc / nu.n_atoms() as f64
    }
}

impl DriftModel for NonlinearF {
    fn name(&self) -> &'static str {
        "nonlinear_f"
    }

    fn param_dim(&self) -> usize {
        1
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn param_box(&self) -> &ParamBox {
        &self.bounds
    }

    fn linear_in_theta(&self) -> bool {
        false
    }

    fn linear_in_measure(&self) -> bool {
        false
    }

    #[inline]
    fn drift_into(&self, theta: &[f64], _t: f64, x: &[f64], nu: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = self.link.eval(theta[0] * self.convolve_g(x[0], nu));
    }

    #[inline]
    fn drift_grad_into(
        &self,
        theta: &[f64],
        _t: f64,
        x: &[f64],
        nu: &EmpiricalMeasure,
        out: &mut [f64],
    ) {
        let conv = self.convolve_g(x[0], nu);
        out[0] = conv * self.link.deriv(theta[0] * conv);
    }

    fn family_violations(&self, theta: &[f64]) -> Vec<ConstraintViolation> {
        if theta[0] <= 0.0 {
            vec![ConstraintViolation {
                constraint: "theta_positive".into(),
                detail: "theta must be strictly positive".into(),
            }]
        } else {
            Vec::new()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_model;
    use approx::assert_relative_eq;

    #[test]
    fn drift_and_gradient_hand_check() {
        let mut spec = ModelSpec::new("nonlinear_f", vec![0.2], vec![3.0]);
        spec.link = Some("tanh".into());
        spec.kernel_g = Some("gaussian_bump".into());
        let model = build_model(&spec).unwrap();
        let nu = EmpiricalMeasure::from_scalar_atoms(&[0.0, 1.0]).unwrap();
        let x = [0.5];
        let conv = 0.5 * ((-0.25f64).exp() + (-0.25f64).exp());
        let theta = [1.5];
        let mut b = [0.0];
        model.drift_into(&theta, 0.0, &x, &nu, &mut b);
        assert_relative_eq!(b[0], (theta[0] * conv).tanh(), max_relative = 1e-14);
        let mut g = [0.0];
        model.drift_grad_into(&theta, 0.0, &x, &nu, &mut g);
        let t = (theta[0] * conv).tanh();
        assert_relative_eq!(g[0], conv * (1.0 - t * t), max_relative = 1e-14);
    }
}
