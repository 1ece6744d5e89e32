//! Monte Carlo verification experiments for the estimation pipeline.
//!
//! Each operation here turns one limit statement about the mean-field
//! model into a finite-sample experiment with explicit pass criteria:
//!
//! - [`lan_experiment`] — the local expansion of log-likelihood ratios
//!   under `θ → θ + (N·I)^{-1/2}u` (Gaussian shift with mean `−|u|²/2`
//!   and variance `|u|²`);
//! - [`normality_experiment`] — asymptotic normality of the
//!   information-standardized estimation error;
//! - [`risk_experiment`] — estimator risk against the Gaussian benchmark
//!   [`losses::gaussian_risk`];
//! - [`nondegeneracy_t0`] — a time-zero sufficient criterion for the
//!   segment-averaged information to be nonsingular over a parameter box;
//! - [`identifiability_fourier_check`] — closed-form Fourier separation
//!   of two double-layer potentials;
//! - [`chaos_rate`] — convergence rate of the particle empirical measure
//!   to the mean-field limit in Wasserstein-1 distance;
//! - [`kl_proxy`] — the Girsanov discrepancy between interacting and
//!   independent (product) dynamics, bounded in N.
//!
//! Replications are independent and may run in parallel; replication `r`
//! draws its simulation seed from `derive_stream(seed, [0, r, ...])` and
//! auxiliary reference clouds from `derive_stream(seed, [1, k])`, so
//! every report is a pure function of `(inputs, seed)` regardless of
//! thread count. Aggregation happens in fixed replication order.

pub mod losses;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::diffusion::DiffusionSpec;
use crate::error::{Error, Result};
use crate::estimate::{mle_linear, mle_numeric, standardized_error, Method, MleOptions};
use crate::likelihood::{limit_fisher, log_likelihood_ratio, ou_limit_fisher, FisherKind, FisherMatrix};
use crate::measure::EmpiricalMeasure;
use crate::models::{validate_theta, DriftModel, ParamBox};
use crate::rng::{derive_stream, StreamRng};
use crate::simulate::{
    product_simulate, reference_flow, simulate_particles, InitialLaw, OuMoments, TimeGrid,
};
use crate::stats::{
    self, gauss_legendre_16_unit, ks_test, linear_fit, median, pairwise_sum, sample_variance,
    standard_error, std_normal_quantile, wasserstein1_1d_unequal,
};
use losses::loss_by_name;

/// Minimum Kolmogorov–Smirnov p-value counted as a pass.
pub const KS_P_MIN: f64 = 0.01;

/// Pass bound on `‖Ĉov − Id‖_F / √p` for standardized errors.
pub const COV_FROB_TOL: f64 = 0.25;

/// A segment-direction pair counts as degenerate when the criterion
/// maximum over the state grid does not exceed this.
pub const NONDEG_THRESHOLD: f64 = 1e-10;

/// Experiments abort when more than this fraction of replications fail.
pub const MAX_FAILURE_FRACTION: f64 = 0.2;

/// Reference-cloud size used when the limit information must be
/// approximated by a simulated flow (non-closed-form families).
const N_REF_FISHER: usize = 10_000;

/// Number of quantile atoms in the closed-form Gaussian reference.
const GAUSSIAN_REF_ATOMS: usize = 100_000;

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn validated_theta(model: &dyn DriftModel, theta: &[f64]) -> Result<()> {
    validate_theta(model, theta).map_err(|v| {
        Error::Domain(format!(
            "{}: invalid parameter: {}",
            model.name(),
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
        ))
    })
}

/// Limit information at `theta`: the closed form for the mean-reverting
/// family (rescaled by `c⁻¹` for non-unit diffusion), a simulated
/// reference-flow quadrature otherwise. The seed only matters on the
/// simulated route.
pub fn information_at(
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    theta: &[f64],
    grid: &TimeGrid,
    mu0: &InitialLaw,
    seed: u64,
) -> Result<FisherMatrix> {
    if model.name() == "mckean_ou" && model.state_dim() == 1 {
        let mom = OuMoments::from_initial_law(theta, mu0)?;
        let base = ou_limit_fisher(&mom, grid)?;
        let w = diff.c_inv()[(0, 0)];
        if w == 1.0 {
            return Ok(base);
        }
        return FisherMatrix::new(FisherKind::ClosedForm, base.matrix() * w);
    }
    let flow_seed = derive_stream(seed, &[1, 0]).lo;
    let flow = reference_flow(model, diff, theta, N_REF_FISHER, grid, mu0, flow_seed)?;
    limit_fisher(model, diff, theta, &flow)
}

// ---------------------------------------------------------------------------
// Local asymptotic normality
// ---------------------------------------------------------------------------

/// Result of a [`lan_experiment`]: the sampled log-likelihood ratios
/// against their predicted Gaussian-shift moments.
#[derive(Debug, Clone, PartialEq)]
pub struct LanReport {
    /// Local direction u.
    pub u: Vec<f64>,
    /// Particle count per replication.
    pub n: usize,
    /// Requested replications.
    pub r: usize,
    /// One log-likelihood ratio per replication, in replication order.
    pub samples: Vec<f64>,
    pub empirical_mean: f64,
    pub empirical_var: f64,
    /// Predicted mean `−|u|²/2`.
    pub predicted_mean: f64,
    /// Predicted variance `|u|²`.
    pub predicted_var: f64,
    /// KS statistic of `(ζ + |u|²/2)/|u|` against the standard normal
    /// (NaN when fewer than 8 samples are available).
    pub ks_stat: f64,
    pub ks_pvalue: f64,
    /// `|mean + |u|²/2| ≤ 3·|u|/√R`.
    pub pass_mean: bool,
    /// KS p-value at least [`KS_P_MIN`].
    pub pass_ks: bool,
    /// `u = 0`: every ratio is identically zero and the standardized
    /// statistic is undefined; flagged rather than treated as an error.
    pub trivially_degenerate: bool,
}

impl LanReport {
    pub fn pass(&self) -> bool {
        self.pass_mean && self.pass_ks
    }
}

/// Sample the log-likelihood ratio `ζ = ℓ(θ + (N·I(θ))^{-1/2}u) − ℓ(θ)`
/// over R independent simulations under θ and compare against the
/// predicted `N(−|u|²/2, |u|²)` shift.
///
/// Preconditions: the limit information at θ is nonsingular and the
/// shifted parameter stays inside the box — otherwise a domain error
/// names the largest feasible `|u|` along the same direction.
#[allow(clippy::too_many_arguments)]
pub fn lan_experiment(
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    theta: &[f64],
    u: &[f64],
    n: usize,
    grid: &TimeGrid,
    mu0: &InitialLaw,
    r: usize,
    seed: u64,
) -> Result<LanReport> {
    let p = model.param_dim();
    if u.len() != p {
        return Err(Error::Shape(format!("lan: u has length {} (need p = {p})", u.len())));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("lan: non-finite u".into()));
    }
    if r < 2 {
        return Err(Error::Domain(format!("lan: need R >= 2 replications, got {r}")));
    }
    validated_theta(model, theta)?;

    let unorm = l2_norm(u);
    if unorm == 0.0 {
        return Ok(LanReport {
            u: u.to_vec(),
            n,
            r,
            samples: vec![0.0; r],
            empirical_mean: 0.0,
            empirical_var: 0.0,
            predicted_mean: 0.0,
            predicted_var: 0.0,
            ks_stat: 0.0,
            ks_pvalue: 1.0,
            pass_mean: true,
            pass_ks: true,
            trivially_degenerate: true,
        });
    }

    let fisher = information_at(model, diff, theta, grid, mu0, seed)?;
    if fisher.is_degenerate() {
        return Err(Error::Singular {
            det: fisher.det(),
            threshold: fisher.degeneracy_threshold(),
            note: Some("limit information is degenerate at theta".into()),
        });
    }
    let root_inv = fisher.inv_sqrt_psd()?;
    let shift = root_inv * DVector::from_column_slice(u) / (n as f64).sqrt();
    let theta_local: Vec<f64> = theta.iter().zip(shift.iter()).map(|(&t, &s)| t + s).collect();

    if validate_theta(model, &theta_local).is_err() {
        // Largest s with θ + s·(N·I)^{-1/2}(u/|u|) still inside the box.
        let bx = model.param_box();
        let mut s_max = f64::INFINITY;
        for q in 0..p {
            let w = shift[q] / unorm;
            let (lo, hi) = bx.interval(q);
            if w > 0.0 {
                s_max = s_max.min((hi - theta[q]) / w);
            } else if w < 0.0 {
                s_max = s_max.min((lo - theta[q]) / w);
            }
        }
        return Err(Error::Domain(format!(
            "lan: local parameter theta + (N I)^(-1/2) u leaves the parameter box; \
             max feasible |u| along this direction is {:.6e}",
            s_max.max(0.0)
        )));
    }

    let samples: Vec<f64> = (0..r)
        .into_par_iter()
        .map(|rep| -> Result<f64> {
            let s = derive_stream(seed, &[0, rep as u64]).lo;
            let paths = simulate_particles(model, diff, theta, n, grid, mu0, s)
                .map_err(|e| Error::Experiment(format!("lan replication {rep}: {e}")))?;
            log_likelihood_ratio(model, diff, theta, &theta_local, &paths)
                .map_err(|e| Error::Experiment(format!("lan replication {rep}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let empirical_mean = stats::mean(&samples);
    let empirical_var = sample_variance(&samples);
    let predicted_mean = -0.5 * unorm * unorm;
    let predicted_var = unorm * unorm;

    let (ks_stat, ks_pvalue) = if samples.len() >= 8 {
        let standardized: Vec<f64> =
            samples.iter().map(|z| (z - predicted_mean) / unorm).collect();
        ks_test(&standardized)?
    } else {
        (f64::NAN, f64::NAN)
    };

    let pass_mean = (empirical_mean - predicted_mean).abs() <= 3.0 * unorm / (r as f64).sqrt();
    let pass_ks = ks_pvalue >= KS_P_MIN;
    Ok(LanReport {
        u: u.to_vec(),
        n,
        r,
        samples,
        empirical_mean,
        empirical_var,
        predicted_mean,
        predicted_var,
        ks_stat,
        ks_pvalue,
        pass_mean,
        pass_ks,
        trivially_degenerate: false,
    })
}

// ---------------------------------------------------------------------------
// Asymptotic normality and risk of the estimator
// ---------------------------------------------------------------------------

/// Result of a [`normality_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormalityReport {
    pub n: usize,
    pub r: usize,
    pub method: Method,
    /// `√N·I^{1/2}(θ̂ − θ*)` per successful replication, replication order.
    pub standardized_errors: Vec<Vec<f64>>,
    pub n_failed: usize,
    /// Per-coordinate KS statistic against the standard normal
    /// (NaN with fewer than 8 successes).
    pub ks_stats: Vec<f64>,
    pub ks_pvalues: Vec<f64>,
    /// Sample covariance of the standardized errors (symmetric PSD).
    pub covariance: DMatrix<f64>,
    /// `‖Ĉov − Id‖_F`.
    pub cov_frobenius_error: f64,
    /// Every coordinate's KS p-value at least [`KS_P_MIN`].
    pub pass_ks: bool,
    /// `‖Ĉov − Id‖_F / √p` at most [`COV_FROB_TOL`].
    pub pass_cov: bool,
}

impl NormalityReport {
    pub fn pass(&self) -> bool {
        self.pass_ks && self.pass_cov
    }
}

/// Shared replication loop: simulate under θ*, estimate, standardize by
/// the supplied information matrix. Fails when more than
/// [`MAX_FAILURE_FRACTION`] of the replications error out.
#[allow(clippy::too_many_arguments)]
fn standardized_error_replications(
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    theta_star: &[f64],
    n: usize,
    grid: &TimeGrid,
    mu0: &InitialLaw,
    r: usize,
    seed: u64,
    method: Method,
    fisher: &FisherMatrix,
) -> Result<(Vec<Vec<f64>>, usize)> {
    if method == Method::Linear && !model.linear_in_theta() {
        return Err(Error::Unsupported(format!(
            "normal-equations estimation needs a drift linear in theta; {} is not",
            model.name()
        )));
    }
    let outcomes: Vec<Result<Vec<f64>>> = (0..r)
        .into_par_iter()
        .map(|rep| -> Result<Vec<f64>> {
            let s = derive_stream(seed, &[0, rep as u64]).lo;
            let paths = simulate_particles(model, diff, theta_star, n, grid, mu0, s)?;
            let est = match method {
                Method::Linear => mle_linear(model, diff, &paths)?,
                Method::Numeric => mle_numeric(model, diff, &paths, &MleOptions::default())?,
            };
            standardized_error(&est.theta_hat, theta_star, fisher, n)
        })
        .collect();
    let n_failed = outcomes.iter().filter(|o| o.is_err()).count();
    if n_failed as f64 > MAX_FAILURE_FRACTION * r as f64 {
        let first = outcomes
            .iter()
            .find_map(|o| o.as_ref().err().map(|e| e.to_string()))
            .unwrap_or_default();
        return Err(Error::Experiment(format!(
            "{n_failed}/{r} replications failed estimation (first failure: {first})"
        )));
    }
    Ok((outcomes.into_iter().filter_map(|o| o.ok()).collect(), n_failed))
}

/// R independent simulate→estimate runs under θ*; the standardized
/// errors `√N·I^{1/2}(θ̂ − θ*)` are tested coordinatewise against the
/// standard normal and their covariance against the identity.
///
/// The information `I` is the limit information at θ*
/// (see [`information_at`]); a degenerate `I` is a precondition failure.
#[allow(clippy::too_many_arguments)]
pub fn normality_experiment(
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    theta_star: &[f64],
    n: usize,
    grid: &TimeGrid,
    mu0: &InitialLaw,
    r: usize,
    seed: u64,
    method: Method,
) -> Result<NormalityReport> {
    if r < 2 {
        return Err(Error::Domain(format!("normality: need R >= 2 replications, got {r}")));
    }
    validated_theta(model, theta_star)?;
    let fisher = information_at(model, diff, theta_star, grid, mu0, seed)?;
    if fisher.is_degenerate() {
        return Err(Error::Singular {
            det: fisher.det(),
            threshold: fisher.degeneracy_threshold(),
            note: Some("limit information is degenerate at theta_star (precondition failure)".into()),
        });
    }
    let (standardized_errors, n_failed) = standardized_error_replications(
        model, diff, theta_star, n, grid, mu0, r, seed, method, &fisher,
    )?;

    let p = model.param_dim();
    let rs = standardized_errors.len();
    let mut ks_stats = vec![f64::NAN; p];
    let mut ks_pvalues = vec![f64::NAN; p];
    if rs >= 8 {
        for q in 0..p {
            let col: Vec<f64> = standardized_errors.iter().map(|e| e[q]).collect();
            let (s, pv) = ks_test(&col)?;
            ks_stats[q] = s;
            ks_pvalues[q] = pv;
        }
    }

    let mean_vec: Vec<f64> = (0..p)
        .map(|q| {
            let col: Vec<f64> = standardized_errors.iter().map(|e| e[q]).collect();
            stats::mean(&col)
        })
        .collect();
    let mut covariance = DMatrix::zeros(p, p);
    for e in &standardized_errors {
        for a in 0..p {
            for b in 0..p {
                covariance[(a, b)] += (e[a] - mean_vec[a]) * (e[b] - mean_vec[b]);
            }
        }
    }
    covariance /= (rs - 1) as f64;
    let mut frob_sq = 0.0;
    for a in 0..p {
        for b in 0..p {
            let d = covariance[(a, b)] - if a == b { 1.0 } else { 0.0 };
            frob_sq += d * d;
        }
    }
    let cov_frobenius_error = frob_sq.sqrt();

    let pass_ks = rs >= 8 && ks_pvalues.iter().all(|&pv| pv >= KS_P_MIN);
    let pass_cov = cov_frobenius_error / (p as f64).sqrt() <= COV_FROB_TOL;
    Ok(NormalityReport {
        n,
        r,
        method,
        standardized_errors,
        n_failed,
        ks_stats,
        ks_pvalues,
        covariance,
        cov_frobenius_error,
        pass_ks,
        pass_cov,
    })
}

/// Result of a [`risk_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct RiskReport {
    /// Registry name of the loss.
    pub loss: String,
    /// Empirical mean of `w(√N·I^{1/2}(θ̂ − θ*))` over replications.
    pub empirical_risk: f64,
    /// Standard error of the empirical risk.
    pub se: f64,
    /// Gaussian benchmark `E[w(Z)]`, `Z ~ N(0, Id_p)`.
    pub gaussian_bound: f64,
    /// `empirical_risk / gaussian_bound`.
    pub ratio: f64,
    pub n_failed: usize,
    /// Per-replication losses, replication order.
    pub samples: Vec<f64>,
}

/// Empirical risk of the estimator under a registry loss, against the
/// Gaussian risk it should attain in the limit. The estimation method is
/// the normal-equations solve for linear-in-θ families, the numeric
/// optimizer otherwise. Errors as [`normality_experiment`].
#[allow(clippy::too_many_arguments)]
pub fn risk_experiment(
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    theta_star: &[f64],
    loss_name: &str,
    n: usize,
    grid: &TimeGrid,
    mu0: &InitialLaw,
    r: usize,
    seed: u64,
) -> Result<RiskReport> {
    if r < 2 {
        return Err(Error::Domain(format!("risk: need R >= 2 replications, got {r}")));
    }
    let loss = loss_by_name(loss_name)?;
    let p = model.param_dim();
    let gaussian_bound = loss.gaussian_risk(p)?;
    validated_theta(model, theta_star)?;
    let fisher = information_at(model, diff, theta_star, grid, mu0, seed)?;
    if fisher.is_degenerate() {
        return Err(Error::Singular {
            det: fisher.det(),
            threshold: fisher.degeneracy_threshold(),
            note: Some("limit information is degenerate at theta_star (precondition failure)".into()),
        });
    }
    let method = if model.linear_in_theta() { Method::Linear } else { Method::Numeric };
    let (errors, n_failed) = standardized_error_replications(
        model, diff, theta_star, n, grid, mu0, r, seed, method, &fisher,
    )?;
    let samples: Vec<f64> = errors.iter().map(|e| loss.eval(e)).collect();
    let empirical_risk = stats::mean(&samples);
    let se = standard_error(&samples);
    let ratio = if gaussian_bound > 0.0 { empirical_risk / gaussian_bound } else { f64::NAN };
    Ok(RiskReport {
        loss: loss.name(),
        empirical_risk,
        se,
        gaussian_bound,
        ratio,
        n_failed,
        samples,
    })
}

// ---------------------------------------------------------------------------
// Non-degeneracy criterion at time zero
// ---------------------------------------------------------------------------

/// Grid sizes for [`nondegeneracy_t0`].
#[derive(Debug, Clone)]
pub struct NondegOptions {
    /// Random segment pairs sampled from the box (box edges are always
    /// included in addition).
    pub n_random_pairs: usize,
    /// Unit directions per pair (structured axis/diagonal directions
    /// first, then seeded random ones; a 1-parameter model needs only
    /// one).
    pub n_directions: usize,
    /// State-grid points per coordinate axis.
    pub n_x: usize,
    /// Seed for the random pairs and directions.
    pub seed: u64,
}

impl Default for NondegOptions {
    fn default() -> Self {
        NondegOptions { n_random_pairs: 32, n_directions: 64, n_x: 101, seed: 0xd16 }
    }
}

/// A failing (segment, direction) pair found by [`nondegeneracy_t0`].
#[derive(Debug, Clone, PartialEq)]
pub struct NondegWitness {
    pub theta: Vec<f64>,
    pub theta_prime: Vec<f64>,
    pub z: Vec<f64>,
    /// Criterion maximum over the state grid for this pair (at or below
    /// [`NONDEG_THRESHOLD`]).
    pub max_over_x: f64,
}

/// Verdict of [`nondegeneracy_t0`].
#[derive(Debug, Clone, PartialEq)]
pub struct NondegReport {
    /// True when every (segment, direction) pair clears the threshold.
    pub non_degenerate: bool,
    pub n_pairs: usize,
    pub n_directions: usize,
    pub n_x: usize,
    pub threshold: f64,
    /// Smallest criterion maximum seen over all (segment, direction)
    /// pairs.
    pub min_max_over_x: f64,
    /// The worst failing pair, when any fails.
    pub witness: Option<NondegWitness>,
}

/// Build the state grid: per coordinate axis, `n_x` points spanning the
/// sample's range widened by three standard deviations (unit fallback
/// width when the sample is degenerate along that axis), other
/// coordinates held at the sample mean.
fn criterion_x_grid(mu0: &EmpiricalMeasure, n_x: usize) -> Vec<Vec<f64>> {
    let d = mu0.dim();
    let n = mu0.n_atoms() as f64;
    let mean = mu0.mean().to_vec();
    let mut out = Vec::with_capacity(d * n_x);
    for k in 0..d {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut var = 0.0;
        for atom in mu0.iter_atoms() {
            let v = atom[k];
            lo = lo.min(v);
            hi = hi.max(v);
            var += (v - mean[k]) * (v - mean[k]);
        }
        let sd = (var / n).sqrt();
        let half = if sd > 0.0 { 3.0 * sd } else { 3.0 };
        let (a, b) = (lo - half, hi + half);
        for i in 0..n_x {
            let mut x = mean.clone();
            x[k] = a + (b - a) * i as f64 / (n_x - 1) as f64;
            out.push(x);
        }
    }
    out
}

/// Unit directions: coordinate axes and two-coordinate diagonals first
/// (z and −z are equivalent under the squared criterion, so only one
/// sign is kept), then seeded random points on the sphere up to `count`.
fn unit_directions(p: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    if p == 1 {
        return vec![vec![1.0]];
    }
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(count);
    for i in 0..p {
        let mut e = vec![0.0; p];
        e[i] = 1.0;
        dirs.push(e);
    }
    let s = 0.5f64.sqrt();
    for i in 0..p {
        for j in i + 1..p {
            let mut a = vec![0.0; p];
            a[i] = s;
            a[j] = s;
            dirs.push(a);
            let mut b = vec![0.0; p];
            b[i] = s;
            b[j] = -s;
            dirs.push(b);
        }
    }
    let mut rng = StreamRng::new(seed, &[2]);
    while dirs.len() < count {
        let mut z = vec![0.0; p];
        rng.fill_normals(&mut z);
        let norm = l2_norm(&z);
        if norm > 1e-8 {
            for v in z.iter_mut() {
                *v /= norm;
            }
            dirs.push(z);
        }
    }
    dirs.truncate(count.max(1));
    dirs
}

/// λ-average over the segment [ta, tb] of the diffusion-weighted drift
/// gradient `c^{-1/2}·∇_θ b(θ_λ; 0, x, μ₀)` by 16-point Gauss–Legendre.
fn averaged_weighted_grad(
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    ta: &[f64],
    tb: &[f64],
    x: &[f64],
    mu0: &EmpiricalMeasure,
    nodes: &[f64; 16],
    weights: &[f64; 16],
) -> Vec<f64> {
    let p = model.param_dim();
    let d = model.state_dim();
    let mut acc = vec![0.0; d * p];
    let mut buf = vec![0.0; d * p];
    let mut theta = vec![0.0; p];
    for (&lam, &w) in nodes.iter().zip(weights) {
        for q in 0..p {
            theta[q] = ta[q] + lam * (tb[q] - ta[q]);
        }
        model.drift_grad_into(&theta, 0.0, x, mu0, &mut buf);
        for (a, &v) in acc.iter_mut().zip(&buf) {
            *a += w * v;
        }
    }
    if let Some(s) = diff.scalar_sigma() {
        if s != 1.0 {
            let w = 1.0 / s;
            for v in acc.iter_mut() {
                *v *= w;
            }
        }
        acc
    } else {
        let cis = diff.c_inv_sqrt();
        let mut out = vec![0.0; d * p];
        for j in 0..d {
            for q in 0..p {
                let mut v = 0.0;
                for k in 0..d {
                    v += cis[(j, k)] * acc[k * p + q];
                }
                out[j * p + q] = v;
            }
        }
        out
    }
}

/// Sufficient non-degeneracy criterion at time zero over a parameter box.
///
/// For parameter segments `[θ, θ′]` (all box edges plus random pairs)
/// and unit directions z, evaluates
///
/// ```text
/// x ↦ Σ_j ( (avg_λ c^{-1/2} ∇_θ b((1−λ)θ + λθ′; 0, x, μ₀))_j · z )²
/// ```
///
/// on a state grid spanning the support of `μ₀` widened by three
/// standard deviations. The verdict is non-degenerate evidence exactly
/// when the maximum over the grid exceeds [`NONDEG_THRESHOLD`] for every
/// (segment, direction) pair; otherwise the worst failing pair is
/// returned as a witness.
///
/// The box is an explicit argument (it need not be the model's own) so
/// that a proposed parameter set can be screened before being adopted.
pub fn nondegeneracy_t0(
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    theta_box: &ParamBox,
    mu0: &EmpiricalMeasure,
    opts: &NondegOptions,
) -> Result<NondegReport> {
    let p = model.param_dim();
    let d = model.state_dim();
    if theta_box.dim() != p {
        return Err(Error::Shape(format!(
            "nondegeneracy: box dimension {} (need p = {p})",
            theta_box.dim()
        )));
    }
    if mu0.dim() != d {
        return Err(Error::Shape(format!(
            "nondegeneracy: sample dimension {} (need d = {d})",
            mu0.dim()
        )));
    }
    if diff.dim() != d {
        return Err(Error::Shape(format!(
            "nondegeneracy: diffusion dimension {} (need d = {d})",
            diff.dim()
        )));
    }
    if opts.n_x < 2 || opts.n_directions == 0 {
        return Err(Error::Domain("nondegeneracy: need n_x >= 2 and n_directions >= 1".into()));
    }

    let xs = criterion_x_grid(mu0, opts.n_x);
    let dirs = unit_directions(p, opts.n_directions, opts.seed);
    let mut pairs = theta_box.edges();
    let mut rng = StreamRng::new(opts.seed, &[0]);
    for _ in 0..opts.n_random_pairs {
        let a = theta_box.sample(&mut rng);
        let b = theta_box.sample(&mut rng);
        pairs.push((a, b));
    }
    let (nodes, weights) = gauss_legendre_16_unit();

    let per_pair: Vec<(f64, Option<NondegWitness>)> = pairs
        .par_iter()
        .map(|(ta, tb)| {
            let averaged: Vec<Vec<f64>> = xs
                .iter()
                .map(|x| averaged_weighted_grad(model, diff, ta, tb, x, mu0, &nodes, &weights))
                .collect();
            let mut pair_min = f64::INFINITY;
            let mut pair_witness: Option<NondegWitness> = None;
            for z in &dirs {
                let mut maxval = 0.0f64;
                for g in &averaged {
                    let mut s = 0.0;
                    for j in 0..d {
                        let mut dot = 0.0;
                        for q in 0..p {
                            dot += g[j * p + q] * z[q];
                        }
                        s += dot * dot;
                    }
                    if s > maxval {
                        maxval = s;
                    }
                }
                if maxval < pair_min {
                    pair_min = maxval;
                }
                if maxval <= NONDEG_THRESHOLD
                    && pair_witness.as_ref().is_none_or(|w| maxval < w.max_over_x)
                {
                    pair_witness = Some(NondegWitness {
                        theta: ta.clone(),
                        theta_prime: tb.clone(),
                        z: z.clone(),
                        max_over_x: maxval,
                    });
                }
            }
            (pair_min, pair_witness)
        })
        .collect();

    let mut min_max_over_x = f64::INFINITY;
    let mut witness: Option<NondegWitness> = None;
    for (pm, w) in per_pair {
        if pm < min_max_over_x {
            min_max_over_x = pm;
        }
        if let Some(w) = w {
            if witness.as_ref().is_none_or(|cur| w.max_over_x < cur.max_over_x) {
                witness = Some(w);
            }
        }
    }
    Ok(NondegReport {
        non_degenerate: witness.is_none(),
        n_pairs: pairs.len(),
        n_directions: dirs.len(),
        n_x: xs.len(),
        threshold: NONDEG_THRESHOLD,
        min_max_over_x,
        witness,
    })
}

// ---------------------------------------------------------------------------
// Fourier identifiability of the double-layer family
// ---------------------------------------------------------------------------

fn check_layer_params(theta: &[f64]) -> Result<()> {
    if theta.len() != 4 {
        return Err(Error::Shape(format!(
            "fourier check: parameter length {} (need 4)",
            theta.len()
        )));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("fourier check: non-finite parameter".into()));
    }
    if theta[1] <= 0.0 || theta[3] <= 0.0 {
        return Err(Error::Domain(
            "fourier check: scale parameters theta_2, theta_4 must be strictly positive".into(),
        ));
    }
    Ok(())
}

/// Signed radial part of the Fourier transform of the double-layer
/// potential gradient: the transform is `iξ` times
///
/// ```text
/// π^{d/2} (θ₁ θ₂^{−d/2} e^{−|ξ|²/(4θ₂)} − θ₃ θ₄^{−d/2} e^{−|ξ|²/(4θ₄)}),
/// ```
///
/// so two parameter points are distinguishable exactly when this scalar
/// differs somewhere. Swapping `(θ₁,θ₂) ↔ (θ₃,θ₄)` negates it.
pub fn double_layer_fourier_scalar(theta: &[f64], d: usize, xi: f64) -> Result<f64> {
    check_layer_params(theta)?;
    if d == 0 {
        return Err(Error::Shape("fourier check: d must be >= 1".into()));
    }
    if !xi.is_finite() {
        return Err(Error::Domain("fourier check: non-finite frequency".into()));
    }
    let hd = 0.5 * d as f64;
    let q = xi * xi;
    Ok(std::f64::consts::PI.powf(hd)
        * (theta[0] * theta[1].powf(-hd) * (-q / (4.0 * theta[1])).exp()
            - theta[2] * theta[3].powf(-hd) * (-q / (4.0 * theta[3])).exp()))
}

/// Maximum over the frequency grid of the transform gap
/// `|ξ|·|s(θ, ξ) − s(θ′, ξ)|` between two double-layer parameter points
/// (see [`double_layer_fourier_scalar`]). A strictly positive gap
/// certifies that the two interaction potentials generate different
/// dynamics.
pub fn identifiability_fourier_check(
    theta: &[f64],
    theta_prime: &[f64],
    d: usize,
    xi_grid: &[f64],
) -> Result<f64> {
    check_layer_params(theta)?;
    check_layer_params(theta_prime)?;
    if xi_grid.is_empty() {
        return Err(Error::Domain("fourier check: empty frequency grid".into()));
    }
    if xi_grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("fourier check: non-finite frequency".into()));
    }
    let mut gap = 0.0f64;
    for &xi in xi_grid {
        let a = double_layer_fourier_scalar(theta, d, xi)?;
        let b = double_layer_fourier_scalar(theta_prime, d, xi)?;
        let g = xi.abs() * (a - b).abs();
        if g > gap {
            gap = g;
        }
    }
    Ok(gap)
}

// ---------------------------------------------------------------------------
// Propagation-of-chaos rate
// ---------------------------------------------------------------------------

/// Reference measure used by [`chaos_rate`].
#[derive(Debug, Clone, PartialEq)]
pub enum ChaosReference {
    /// Exact Gaussian quantile atoms from the closed-form moments
    /// (`mckean_ou`, d = 1, unit diffusion only).
    GaussianClosedForm,
    /// Simulated reference cloud of `n_ref` particles.
    Cloud { n_ref: usize },
}

/// Result of a [`chaos_rate`] experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub levels: Vec<usize>,
    /// Median distance per level.
    pub medians: Vec<f64>,
    /// Raw per-replication distances, one row per level.
    pub distances: Vec<Vec<f64>>,
    /// Reference cloud size (quantile atoms for the closed form).
    pub n_ref: usize,
    /// Fitted slope of `log median` against `log N`.
    pub slope: f64,
    pub intercept: f64,
}

/// Convergence rate of the particle system's empirical measure at the
/// horizon towards the mean-field reference, over increasing particle
/// counts. In one dimension the distance is the exact Wasserstein-1
/// between the particle sample and the reference sample; in higher
/// dimension it is the synchronous-coupling upper bound
/// `(1/N) Σ_i |X_T^i − X̄_T^i|`, with `X̄` the product-dynamics copy
/// driven by the same noise (this requires a [`ChaosReference::Cloud`]).
#[allow(clippy::too_many_arguments)]
pub fn chaos_rate(
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    theta: &[f64],
    levels: &[usize],
    grid: &TimeGrid,
    mu0: &InitialLaw,
    r: usize,
    seed: u64,
    reference: &ChaosReference,
) -> Result<RateReport> {
    if levels.len() < 3 {
        return Err(Error::Domain(format!(
            "chaos rate: need at least 3 particle levels, got {}",
            levels.len()
        )));
    }
    if levels[0] == 0 || levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain(
            "chaos rate: degenerate levels (need strictly increasing positive counts)".into(),
        ));
    }
    if r == 0 {
        return Err(Error::Domain("chaos rate: need at least one replication".into()));
    }
    validated_theta(model, theta)?;
    let d = model.state_dim();
    let m = grid.n_steps();

    enum Ref {
        Sample(Vec<f64>),
        Flow(crate::simulate::MeasureFlow),
    }
    let (reference_data, n_ref) = match reference {
        ChaosReference::GaussianClosedForm => {
            if model.name() != "mckean_ou" || d != 1 {
                return Err(Error::Domain(
                    "chaos rate: the closed-form Gaussian reference is only available for the \
                     1-d mean-reverting family"
                        .into(),
                ));
            }
            if diff.scalar_sigma() != Some(1.0) {
                return Err(Error::Domain(
                    "chaos rate: the closed-form Gaussian reference requires unit diffusion".into(),
                ));
            }
            let mom = OuMoments::from_initial_law(theta, mu0)?;
            let t_h = grid.t_horizon();
            let (mt, sd) = (mom.mean(t_h), mom.variance(t_h).max(0.0).sqrt());
            let k = GAUSSIAN_REF_ATOMS;
            let sample = (1..=k)
                .map(|i| std_normal_quantile((i as f64 - 0.5) / k as f64).map(|q| mt + sd * q))
                .collect::<Result<Vec<f64>>>()?;
            (Ref::Sample(sample), k)
        }
        ChaosReference::Cloud { n_ref } => {
            let max_level = *levels.last().unwrap();
            if *n_ref < max_level {
                return Err(Error::Domain(format!(
                    "chaos rate: reference cloud size {n_ref} below the largest level {max_level}"
                )));
            }
            let ref_seed = derive_stream(seed, &[1, 1]).lo;
            let flow = reference_flow(model, diff, theta, *n_ref, grid, mu0, ref_seed)?;
            if d == 1 {
                (Ref::Sample(flow.measure_at(m).atoms_flat().to_vec()), *n_ref)
            } else {
                (Ref::Flow(flow), *n_ref)
            }
        }
    };
    if d > 1 && matches!(reference_data, Ref::Sample(_)) {
        return Err(Error::Domain(
            "chaos rate: d > 1 needs a simulated reference cloud for the coupling bound".into(),
        ));
    }

    let mut medians = Vec::with_capacity(levels.len());
    let mut distances = Vec::with_capacity(levels.len());
    for (idx, &n_level) in levels.iter().enumerate() {
        let reps: Vec<f64> = (0..r)
            .into_par_iter()
            .map(|rep| -> Result<f64> {
                let s = derive_stream(seed, &[0, idx as u64, rep as u64]).lo;
                let ctx = |e: Error| {
                    Error::Experiment(format!("chaos level {n_level} replication {rep}: {e}"))
                };
                let sim =
                    simulate_particles(model, diff, theta, n_level, grid, mu0, s).map_err(ctx)?;
                match &reference_data {
                    Ref::Sample(sample) => {
                        wasserstein1_1d_unequal(sim.slice_at(m), sample).map_err(ctx)
                    }
                    Ref::Flow(flow) => {
                        // Same seed as the interacting run: identical
                        // initial draws and Brownian increments, so the
                        // pair is synchronously coupled.
                        let prod = product_simulate(model, diff, theta, n_level, flow, mu0, s)
                            .map_err(ctx)?;
                        let xs = sim.slice_at(m);
                        let ys = prod.slice_at(m);
                        let per: Vec<f64> = (0..n_level)
                            .map(|i| {
                                let mut acc = 0.0;
                                for k in 0..d {
                                    let dv = xs[i * d + k] - ys[i * d + k];
                                    acc += dv * dv;
                                }
                                acc.sqrt()
                            })
                            .collect();
                        Ok(pairwise_sum(&per) / n_level as f64)
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let med = median(&reps);
        if !(med.is_finite() && med > 0.0) {
            return Err(Error::Experiment(format!(
                "chaos rate: degenerate level N = {n_level} (median distance {med})"
            )));
        }
        medians.push(med);
        distances.push(reps);
    }

    let log_n: Vec<f64> = levels.iter().map(|&n| (n as f64).ln()).collect();
    let log_med: Vec<f64> = medians.iter().map(|&v| v.ln()).collect();
    let (slope, intercept) = linear_fit(&log_n, &log_med)?;
    if !slope.is_finite() {
        return Err(Error::Experiment("chaos rate: non-finite fitted slope".into()));
    }
    Ok(RateReport { levels: levels.to_vec(), medians, distances, n_ref, slope, intercept })
}

// ---------------------------------------------------------------------------
// Girsanov discrepancy between interacting and product dynamics
// ---------------------------------------------------------------------------

/// Result of a [`kl_proxy`] experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct KlReport {
    /// Monte Carlo estimate of the discrepancy.
    pub estimate: f64,
    /// Standard error over replications.
    pub se: f64,
    pub n: usize,
    /// Reference cloud size backing the mean-field flow.
    pub n_ref: usize,
    /// Per-replication values, replication order.
    pub samples: Vec<f64>,
}

/// Monte Carlo estimate of the Girsanov discrepancy
///
/// ```text
/// (1/2) Σ_i Σ_j Δt |b(θ; t_j, X^i_{t_j}, μ^{(N)}_{t_j}) − b(θ; t_j, X^i_{t_j}, μ̂^θ_{t_j})|²
/// ```
///
/// where the paths follow the *product* (independent-copy) dynamics
/// driven by the reference flow `μ̂^θ`, and `μ^{(N)}` is their empirical
/// measure. For drifts affine in the measure this quantity stays bounded
/// as N grows — interacting and independent systems remain statistically
/// indistinguishable per particle. Families that are not affine in the
/// measure are unsupported.
#[allow(clippy::too_many_arguments)]
pub fn kl_proxy(
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    theta: &[f64],
    n: usize,
    grid: &TimeGrid,
    mu0: &InitialLaw,
    r: usize,
    seed: u64,
    n_ref: usize,
) -> Result<KlReport> {
    if !model.linear_in_measure() {
        return Err(Error::Unsupported(format!(
            "kl proxy: needs a drift affine in the measure; {} is not",
            model.name()
        )));
    }
    if r < 2 {
        return Err(Error::Domain(format!("kl proxy: need R >= 2 replications, got {r}")));
    }
    validated_theta(model, theta)?;
    let d = model.state_dim();
    let m = grid.n_steps();
    let dt = grid.dt();

    let ref_seed = derive_stream(seed, &[1, 2]).lo;
    let flow = reference_flow(model, diff, theta, n_ref, grid, mu0, ref_seed)?;

    let samples: Vec<f64> = (0..r)
        .into_par_iter()
        .map(|rep| -> Result<f64> {
            let s = derive_stream(seed, &[0, rep as u64]).lo;
            let paths = product_simulate(model, diff, theta, n, &flow, mu0, s)
                .map_err(|e| Error::Experiment(format!("kl replication {rep}: {e}")))?;
            let mut step_vals = vec![0.0; n];
            let mut b_cloud = vec![0.0; d];
            let mut b_flow = vec![0.0; d];
            let mut total = 0.0;
            for j in 0..m {
                let nu_cloud = paths.measure_at(j);
                let nu_flow = flow.measure_at(j);
                let t = grid.time(j);
                for (i, val) in step_vals.iter_mut().enumerate() {
                    let x = paths.state(j, i);
                    model.drift_into(theta, t, x, &nu_cloud, &mut b_cloud);
                    model.drift_into(theta, t, x, nu_flow, &mut b_flow);
                    let mut sq = 0.0;
                    for k in 0..d {
                        let dv = b_cloud[k] - b_flow[k];
                        sq += dv * dv;
                    }
                    *val = sq;
                }
                total += pairwise_sum(&step_vals) * dt;
            }
            Ok(0.5 * total)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(KlReport {
        estimate: stats::mean(&samples),
        se: standard_error(&samples),
        n,
        n_ref,
        samples,
    })
}
