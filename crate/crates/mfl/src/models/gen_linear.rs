//! General linear-in-θ family (p = 2, d = 1) with named kernels.
//!
//! ```text
//! b(θ; t, x, ν) = θ₁ f(x) + θ₂ (g ⋆ ν)(x)
//! ```
//!
//! `f` acts on the particle's own position, `g` is convolved against the
//! cloud. The feature row `(f(x), (g ⋆ ν)(x))` is θ-independent, so the
//! likelihood equations are explicit (see `estimate`).

use std::sync::Arc;

use super::kernels::{kernel_by_name, Kernel};
use super::{ConstraintViolation, DriftModel, ModelSpec, ParamBox};
use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;

#[derive(Debug)]
pub struct GenLinear {
    bounds: ParamBox,
    f: Kernel,
    g: Kernel,
}

pub fn build(spec: &ModelSpec) -> Result<Arc<dyn DriftModel>> {
    if spec.d != 1 {
        return Err(Error::Shape(format!("gen_linear: d = {} unsupported (scalar family)", spec.d)));
    }
    let bounds = ParamBox::new(spec.lower.clone(), spec.upper.clone())?;
    if bounds.dim() != 2 {
        return Err(Error::Shape(format!("gen_linear: box dimension {} (need p = 2)", bounds.dim())));
    }
    let f = kernel_by_name(
        spec.kernel_f
            .as_deref()
            .ok_or_else(|| Error::config_msg("gen_linear: missing kernel_f"))?,
    )?;
    let g = kernel_by_name(
        spec.kernel_g
            .as_deref()
            .ok_or_else(|| Error::config_msg("gen_linear: missing kernel_g"))?,
    )?;
    Ok(Arc::new(GenLinear { bounds, f, g }))
}

impl GenLinear {
    #[inline]
    fn convolve_g(&self, x: f64, nu: &EmpiricalMeasure) -> f64 {
        let mut acc = 0.0;
        for atom in nu.iter_atoms() {
            acc += self.g.eval(x - atom[0]);
        }
        acc / nu.n_atoms() as f64
    }
}

impl DriftModel for GenLinear {
    fn name(&self) -> &'static str {
        "gen_linear"
    }

    fn param_dim(&self) -> usize {
        2
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn param_box(&self) -> &ParamBox {
        &self.bounds
    }

    fn linear_in_theta(&self) -> bool {
        true
    }

    fn linear_in_measure(&self) -> bool {
        true
    }

    #[inline]
    fn drift_into(&self, theta: &[f64], _t: f64, x: &[f64], nu: &EmpiricalMeasure, out: &mut [f64]) {
        // The convolution is O(|ν|); skip it when its coefficient is
        // exactly zero (the gradient path never skips).
        let interaction =
            if theta[1] == 0.0 { 0.0 } else { theta[1] * self.convolve_g(x[0], nu) };
        out[0] = theta[0] * self.f.eval(x[0]) + interaction;
    }

    #[inline]
    fn drift_grad_into(
        &self,
        _theta: &[f64],
        _t: f64,
        x: &[f64],
        nu: &EmpiricalMeasure,
        out: &mut [f64],
    ) {
        out[0] = self.f.eval(x[0]);
        out[1] = self.convolve_g(x[0], nu);
    }

    fn family_violations(&self, _theta: &[f64]) -> Vec<ConstraintViolation> {
        Vec::new()
    }
}
