//! Simulation and parametric inference for mean-field interacting
//! particle systems.
//!
//! The crate simulates N-particle systems of the form
//!
//! ```text
//! dX^i_t = b(θ; t, X^i_t, μ^(N)_t) dt + σ dB^i_t,    μ^(N)_t = N⁻¹ Σ_j δ_{X^j_t}
//! ```
//!
//! where the drift depends on the parameter θ, the particle's own state,
//! and the empirical measure of the whole cloud. On top of the simulator
//! it provides the discretized Girsanov log-likelihood, closed-form and
//! quasi-Newton maximum-likelihood estimators for the drift parameter,
//! Fisher information matrices with degeneracy diagnostics, and a set of
//! Monte Carlo experiments (local asymptotic normality of the likelihood
//! ratio, asymptotic normality of the estimator, minimax-scale risk,
//! chaos decay rates, KL-distance boundedness between the interacting and
//! product systems).
//!
//! Drift families are trait objects behind a string-keyed registry
//! ([`models::REGISTRY`]): configs and the CLI select a family by name at
//! runtime, and every downstream operation is generic over
//! [`models::DriftModel`].

pub mod diagnostics;
pub mod diffusion;
pub mod error;
pub mod estimate;
pub mod harness;
pub mod likelihood;
pub mod measure;
pub mod models;
pub mod rng;
pub mod simulate;
pub mod stats;

pub use error::{Error, Result};
