//! Mean-field Ornstein–Uhlenbeck family (p = 3, d = 1).
//!
//! ```text
//! b(θ; t, x, ν) = θ₁ x + θ₂ − θ₃ (x − mean(ν))
//! ```
//!
//! θ₁ is the individual growth/reversion rate, θ₂ a constant input, θ₃
//! the strength of attraction toward the cloud mean. The drift is linear
//! in θ with feature row `(x, 1, mean(ν) − x)` and affine in the measure,
//! and the limiting Gaussian marginals are available in closed form (see
//! `simulate::OuMoments`), which makes this family the workhorse of the
//! acceptance experiments.
//!
//! A valid box keeps 0 out of the θ₁ interval and keeps the θ₁ and θ₃
//! intervals disjoint, so that the closed-form moments (which divide by
//! θ₁ and by θ₃ − θ₁) exist uniformly over Θ.

use std::sync::Arc;

use super::{ConstraintViolation, DriftModel, ModelSpec, ParamBox};
use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;

#[derive(Debug)]
pub struct McKeanOu {
    bounds: ParamBox,
}

pub fn build(spec: &ModelSpec) -> Result<Arc<dyn DriftModel>> {
    if spec.d != 1 {
        return Err(Error::Shape(format!("mckean_ou: d = {} unsupported (scalar family)", spec.d)));
    }
    let bounds = ParamBox::new(spec.lower.clone(), spec.upper.clone())?;
    if bounds.dim() != 3 {
        return Err(Error::Shape(format!("mckean_ou: box dimension {} (need p = 3)", bounds.dim())));
    }
    if bounds.lower()[0] <= 0.0 && bounds.upper()[0] >= 0.0 {
        return Err(Error::Domain(
            "mckean_ou: 0 must lie outside the theta_1 interval (nonzero rate keeps the mean dynamics invertible)".into(),
        ));
    }
    if intervals_overlap(
        (bounds.lower()[0], bounds.upper()[0]),
        (bounds.lower()[2], bounds.upper()[2]),
    ) {
        return Err(Error::Domain(
            "mckean_ou: theta_1 and theta_3 intervals must be disjoint (theta_1 = theta_3 degenerates the variance dynamics)".into(),
        ));
    }
    Ok(Arc::new(McKeanOu { bounds }))
}

fn intervals_overlap(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

impl DriftModel for McKeanOu {
    fn name(&self) -> &'static str {
        "mckean_ou"
    }

    fn param_dim(&self) -> usize {
        3
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
        let xv = x[0];
        out[0] = theta[0] * xv + theta[1] - theta[2] * (xv - nu.mean_first());
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
        out[0] = x[0];
        out[1] = 1.0;
        out[2] = nu.mean_first() - x[0];
    }

    fn family_violations(&self, theta: &[f64]) -> Vec<ConstraintViolation> {
        let mut v = Vec::new();
        if theta[0] == 0.0 {
            v.push(ConstraintViolation {
                constraint: "theta_1_nonzero".into(),
                detail: "theta[0] = 0 breaks the nonzero-rate constraint that yields the \
                         non-degeneracy of the limit information"
                    .into(),
            });
        }
        if theta[0] == theta[2] {
            v.push(ConstraintViolation {
                constraint: "theta_1_ne_theta_3".into(),
                detail: "theta[0] = theta[2] degenerates the variance dynamics".into(),
            });
        }
        v
    }
}
