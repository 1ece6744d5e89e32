//! Double-layer Gaussian interaction family (p = 4, d ≥ 1).
//!
//! The drift is the convolution of the cloud with the gradient of a
//! two-scale radial potential — short-range repulsion against long-range
//! attraction:
//!
//! ```text
//! ∇U_θ(x)_j = 2 θ₁ θ₂ x_j exp(−θ₂|x|²) − 2 θ₃ θ₄ x_j exp(−θ₄|x|²)
//! b(θ; t, x, ν)_j = (1/n) Σ_k ∇U_θ(x − y_k)_j
//! ```
//!
//! θ₁, θ₃ are layer strengths and θ₂, θ₄ inverse range scales. The
//! θ-gradient of one summand is, per state coordinate j,
//!
//! ```text
//! G(θ; r)_j = ( 2 θ₂ r_j e₂,  2 θ₁ r_j (1 − θ₂|r|²) e₂,
//!              −2 θ₄ r_j e₄, −2 θ₃ r_j (1 − θ₄|r|²) e₄ ),
//! e₂ = exp(−θ₂|r|²), e₄ = exp(−θ₄|r|²),
//! ```
//!
//! convolved against ν. The two layers are mutually identifiable exactly
//! when θ₂ ≠ θ₄ (equal scales collapse the layers into one), hence the
//! box requirement that the θ₂ and θ₄ intervals be disjoint; all four
//! parameters stay strictly positive.

use std::sync::Arc;

use super::{ConstraintViolation, DriftModel, ModelSpec, ParamBox};
use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;

#[derive(Debug)]
pub struct DoubleLayer {
    bounds: ParamBox,
    d: usize,
}

pub fn build(spec: &ModelSpec) -> Result<Arc<dyn DriftModel>> {
    if spec.d == 0 {
        return Err(Error::Shape("double_layer: d must be >= 1".into()));
    }
    let bounds = ParamBox::new(spec.lower.clone(), spec.upper.clone())?;
    if bounds.dim() != 4 {
        return Err(Error::Shape(format!("double_layer: box dimension {} (need p = 4)", bounds.dim())));
    }
    if bounds.lower().iter().any(|&lo| lo <= 0.0) {
        return Err(Error::Domain(
            "double_layer: box must lie in (0, inf)^4 (strengths and scales strictly positive)".into(),
        ));
    }
    if bounds.lower()[1] <= bounds.upper()[3] && bounds.lower()[3] <= bounds.upper()[1] {
        return Err(Error::Domain(
            "double_layer: theta_2 and theta_4 intervals must be disjoint (theta_2 = theta_4 collapses the two layers)".into(),
        ));
    }
    Ok(Arc::new(DoubleLayer { bounds, d: spec.d }))
}

impl DoubleLayer {
    /// Shared convolution sweep: drift, and optionally the gradient, in a
    /// single pass over the atoms (the exponentials dominate the cost and
    /// are reused between the two outputs).
    fn sweep(
        &self,
        theta: &[f64],
        x: &[f64],
        nu: &EmpiricalMeasure,
        drift_out: &mut [f64],
        mut grad_out: Option<&mut [f64]>,
    ) {
        let d = self.d;
        let (t1, t2, t3, t4) = (theta[0], theta[1], theta[2], theta[3]);
        drift_out.fill(0.0);
        if let Some(g) = grad_out.as_deref_mut() {
            g.fill(0.0);
        }
        for atom in nu.iter_atoms() {
            let mut q = 0.0;
            for j in 0..d {
                let rj = x[j] - atom[j];
                q += rj * rj;
            }
            let e2 = (-t2 * q).exp();
            let e4 = (-t4 * q).exp();
            let s2 = 2.0 * t2 * e2;
            let s4 = 2.0 * t4 * e4;
            let w2 = 2.0 * t1 * (1.0 - t2 * q) * e2;
            let w4 = -2.0 * t3 * (1.0 - t4 * q) * e4;
            for j in 0..d {
                let rj = x[j] - atom[j];
                drift_out[j] += rj * (t1 * s2 - t3 * s4);
                if let Some(g) = grad_out.as_deref_mut() {
                    let row = &mut g[j * 4..(j + 1) * 4];
                    row[0] += rj * s2;
                    row[1] += rj * w2;
                    row[2] -= rj * s4;
                    row[3] += rj * w4;
                }
            }
        }
        let inv_n = 1.0 / nu.n_atoms() as f64;
        for v in drift_out.iter_mut() {
            *v *= inv_n;
        }
        if let Some(g) = grad_out {
            for v in g.iter_mut() {
                *v *= inv_n;
            }
        }
    }
}

impl DriftModel for DoubleLayer {
    fn name(&self) -> &'static str {
        "double_layer"
    }

    fn param_dim(&self) -> usize {
        4
    }

    fn state_dim(&self) -> usize {
        self.d
    }

    fn param_box(&self) -> &ParamBox {
        &self.bounds
    }

    fn linear_in_theta(&self) -> bool {
        false
    }

    fn linear_in_measure(&self) -> bool {
        true
    }

    fn drift_into(&self, theta: &[f64], _t: f64, x: &[f64], nu: &EmpiricalMeasure, out: &mut [f64]) {
        self.sweep(theta, x, nu, out, None);
    }

    fn drift_grad_into(
        &self,
        theta: &[f64],
        _t: f64,
        x: &[f64],
        nu: &EmpiricalMeasure,
        out: &mut [f64],
    ) {
        let mut drift = vec![0.0; self.d];
        self.sweep(theta, x, nu, &mut drift, Some(out));
    }

    fn drift_and_grad_into(
        &self,
        theta: &[f64],
        _t: f64,
        x: &[f64],
        nu: &EmpiricalMeasure,
        drift_out: &mut [f64],
        grad_out: &mut [f64],
    ) {
        self.sweep(theta, x, nu, drift_out, Some(grad_out));
    }

    fn family_violations(&self, theta: &[f64]) -> Vec<ConstraintViolation> {
        let mut v = Vec::new();
        if theta.iter().any(|&t| t <= 0.0) {
            v.push(ConstraintViolation {
                constraint: "positive_parameters".into(),
                detail: "all four parameters must be strictly positive".into(),
            });
        }
        if theta[1] == theta[3] {
            v.push(ConstraintViolation {
                constraint: "theta_2_ne_theta_4".into(),
                detail: "equal inverse scales collapse the two layers (non-identifiable)".into(),
            });
        }
        v
    }
}
