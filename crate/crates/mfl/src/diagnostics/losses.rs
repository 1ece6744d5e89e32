//! Loss functions for minimax-risk experiments, with their Gaussian risks.
//!
//! Losses are drawn from a small named registry so that configs stay
//! declarative. For each loss the *Gaussian risk* — the expectation of
//! `w(Z)` under a standard normal vector `Z` in dimension `p` — is
//! available in closed form; it is the benchmark an efficient estimator's
//! standardized-error risk is compared against.

use crate::error::{Error, Result};
use crate::stats::chi_squared_upper_tail;

/// A named loss function on `R^p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loss {
    /// `w ≡ 1`.
    One,
    /// `w(x) = |x|²`.
    SquaredNorm,
    /// `w(x) = |x₁|`.
    AbsFirst,
    /// `w(x) = 1{|x| > c}`.
    Indicator { c: f64 },
}

/// Registry lookup: `one`, `squared_norm`, `abs_first`, `indicator:<c>`.
pub fn loss_by_name(name: &str) -> Result<Loss> {
    match name {
        "one" => Ok(Loss::One),
        "squared_norm" => Ok(Loss::SquaredNorm),
        "abs_first" => Ok(Loss::AbsFirst),
        s if s.starts_with("indicator:") => {
            let c: f64 = s["indicator:".len()..].parse().map_err(|_| {
                Error::Domain(format!("loss '{s}': threshold is not a number"))
            })?;
            if !c.is_finite() {
                return Err(Error::Domain(format!("loss '{s}': non-finite threshold")));
            }
            Ok(Loss::Indicator { c })
        }
        _ => Err(Error::Domain(format!(
            "unknown loss '{name}' (known: one, squared_norm, abs_first, indicator:<c>)"
        ))),
    }
}

impl Loss {
    /// Canonical registry name (round-trips through [`loss_by_name`]).
    pub fn name(&self) -> String {
        match self {
            Loss::One => "one".into(),
            Loss::SquaredNorm => "squared_norm".into(),
            Loss::AbsFirst => "abs_first".into(),
            Loss::Indicator { c } => format!("indicator:{c}"),
        }
    }

    /// Evaluate the loss at `x`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Loss::One => 1.0,
            Loss::SquaredNorm => x.iter().map(|v| v * v).sum(),
            Loss::AbsFirst => x[0].abs(),
            Loss::Indicator { c } => {
                if *c < 0.0 {
                    return 1.0;
                }
                let sq: f64 = x.iter().map(|v| v * v).sum();
                if sq > c * c {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// `E[w(Z)]` for `Z ~ N(0, Id_p)`, in closed form.
    ///
    /// - `one` → 1
    /// - `squared_norm` → p (sum of p unit variances)
    /// - `abs_first` → √(2/π) (half-normal mean, any p)
    /// - `indicator:c` → P(χ²_p > c²) (and 1 whenever c ≤ 0)
    pub fn gaussian_risk(&self, p: usize) -> Result<f64> {
        if p == 0 {
            return Err(Error::Domain("gaussian risk: p must be >= 1".into()));
        }
        match self {
            Loss::One => Ok(1.0),
            Loss::SquaredNorm => Ok(p as f64),
            Loss::AbsFirst => Ok((2.0 / std::f64::consts::PI).sqrt()),
            Loss::Indicator { c } => {
                if *c <= 0.0 {
                    Ok(1.0)
                } else {
                    chi_squared_upper_tail(p, c * c)
                }
            }
        }
    }
}

/// Gaussian risk by registry name (see [`Loss::gaussian_risk`]).
pub fn gaussian_risk(name: &str, p: usize) -> Result<f64> {
    loss_by_name(name)?.gaussian_risk(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use crate::stats::std_normal_cdf;
    use approx::assert_relative_eq;

    #[test]
    fn registry_round_trip_and_unknown_names() {
        for name in ["one", "squared_norm", "abs_first", "indicator:1.5"] {
            let loss = loss_by_name(name).unwrap();
            assert_eq!(loss.name(), name);
        }
        assert!(loss_by_name("cubic").is_err());
        assert!(loss_by_name("indicator:abc").is_err());
        assert!(loss_by_name("indicator:inf").is_err());
    }

    #[test]
    fn pointwise_evaluation() {
        assert_eq!(loss_by_name("one").unwrap().eval(&[9.0, -2.0]), 1.0);
        assert_relative_eq!(loss_by_name("squared_norm").unwrap().eval(&[1.0, 2.0]), 5.0);
        assert_relative_eq!(loss_by_name("abs_first").unwrap().eval(&[-3.0, 2.0]), 3.0);
        let ind = loss_by_name("indicator:2").unwrap();
        assert_eq!(ind.eval(&[3.0, 0.0]), 1.0);
        assert_eq!(ind.eval(&[1.0, 0.0]), 0.0);
        assert_eq!(ind.eval(&[2.0, 0.0]), 0.0); // strict inequality
    }

    #[test]
    fn closed_forms() {
        assert_relative_eq!(gaussian_risk("squared_norm", 3).unwrap(), 3.0);
        assert_relative_eq!(gaussian_risk("one", 7).unwrap(), 1.0);
        assert_relative_eq!(
            gaussian_risk("abs_first", 5).unwrap(),
            (2.0 / std::f64::consts::PI).sqrt()
        );
        // Full mass: |Z| > 0 almost surely.
        assert_relative_eq!(gaussian_risk("indicator:0", 4).unwrap(), 1.0);
        assert_relative_eq!(gaussian_risk("indicator:-1", 2).unwrap(), 1.0);
        // p = 1: P(|Z| > c) = 2 Φ(−c).
        assert_relative_eq!(
            gaussian_risk("indicator:1", 1).unwrap(),
            2.0 * std_normal_cdf(-1.0),
            max_relative = 1e-10
        );
        assert!(gaussian_risk("squared_norm", 0).is_err());
    }

    #[test]
    fn closed_forms_match_monte_carlo() {
        // Independent oracle: sample means over standard normal vectors
        // agree with each closed form to 4 standard errors.
        let n = 200_000usize;
        let cases: &[(&str, usize, f64)] = &[
            ("squared_norm", 2, (2.0 * 2.0f64 / n as f64).sqrt()), // Var(χ²₂) = 4
            ("abs_first", 2, ((1.0 - 2.0 / std::f64::consts::PI) / n as f64).sqrt()),
            ("indicator:1", 3, (0.25 / n as f64).sqrt()), // Bernoulli var ≤ 1/4
        ];
        for (name, p, se) in cases {
            let loss = loss_by_name(name).unwrap();
            let expect = loss.gaussian_risk(*p).unwrap();
            let mut rng = StreamRng::new(0xbeef, &[*p as u64]);
            let mut z = vec![0.0; *p];
            let mut sum = 0.0;
            for _ in 0..n {
                rng.fill_normals(&mut z);
                sum += loss.eval(&z);
            }
            let mc = sum / n as f64;
            assert!(
                (mc - expect).abs() <= 4.0 * se,
                "{name}: mc {mc} vs closed form {expect}"
            );
        }
    }
}
