//! Maximum-likelihood estimation of the drift parameter.
//!
//! For families that are linear in θ (`b = Σ_q θ_q φ_q(t, x, ν)`), the
//! discretized likelihood is an explicit quadratic and the MLE solves the
//! normal equations
//!
//! ```text
//! A θ̂ = B,   A = (1/N) Σ_{i,j} φ φᵀ Δt,   B = (1/N) Σ_{i,j} φ ΔX
//! ```
//!
//! (for scalar diffusion the c⁻¹ weighting cancels from the argmax). The
//! quadratic identity `score(θ) = N (B − A θ) / c` makes A, B a complete
//! summary of the likelihood.
//!
//! Nonlinear families go through a projected-BFGS ascent with the
//! analytic score, Armijo backtracking along the projected path, inverse
//! Hessian resets on active-set changes, and seeded multi-starts. Linear
//! families reuse (A, B) as a quadratic fast path inside the same
//! optimizer, so box constraints are honored in both routes.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::diffusion::DiffusionSpec;
use crate::error::{Error, Result};
use crate::likelihood::{empirical_fisher, log_likelihood_discrete, loglik_and_score, score_discrete, FisherMatrix};
use crate::models::{validate_theta, DriftModel};
use crate::rng::StreamRng;
use crate::simulate::ParticlePaths;
use crate::stats::pairwise_sum;

/// Relative determinant floor below which the Gram matrix A counts as
/// singular (same convention as Fisher degeneracy).
const GRAM_RTOL: f64 = 1e-12;

/// Boundary-contact tolerance for reporting active constraints.
const BOUNDARY_RTOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Linear,
    Numeric,
}

/// Estimation result with convergence diagnostics.
#[derive(Debug, Clone)]
pub struct EstimateResult {
    pub theta_hat: Vec<f64>,
    pub method: Method,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
    pub score_norm: f64,
    pub boundary_active: Vec<bool>,
}

/// Sufficient statistics of the quadratic likelihood for linear families.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    a: DMatrix<f64>,
    b: DVector<f64>,
    n: usize,
    m: usize,
}

impl NormalEquations {
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn moment(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn n_particles(&self) -> usize {
        self.n
    }

    pub fn n_steps(&self) -> usize {
        self.m
    }

    /// Unnormalized quadratic log-likelihood N(θᵀB − ½θᵀAθ) (unit c).
    pub fn loglik(&self, theta: &[f64]) -> f64 {
        let th = DVector::from_column_slice(theta);
        self.n as f64 * (th.dot(&self.b) - 0.5 * th.dot(&(&self.a * &th)))
    }

    /// Score N(B − Aθ) of the quadratic form (unit c).
    pub fn score(&self, theta: &[f64]) -> Vec<f64> {
        let th = DVector::from_column_slice(theta);
        let s = (&self.b - &self.a * th) * self.n as f64;
        s.iter().cloned().collect()
    }

    /// Unconstrained solution of A θ = B via SPD solve; errors when A is
    /// numerically singular.
    pub fn solve(&self) -> Result<Vec<f64>> {
        let (det, threshold) = gram_degenerate(&self.a);
        if !(det > threshold) {
            return Err(Error::Singular {
                det,
                threshold,
                note: Some("normal-equation Gram matrix".into()),
            });
        }
        let chol = self.a.clone().cholesky().ok_or(Error::Singular {
            det,
            threshold,
            note: Some("Cholesky failed on Gram matrix".into()),
        })?;
        Ok(chol.solve(&self.b).iter().cloned().collect())
    }
}

fn check_paths(model: &dyn DriftModel, paths: &ParticlePaths) -> Result<()> {
    if paths.dim() != model.state_dim() {
        return Err(Error::Shape(format!(
            "estimate: paths dimension {} vs model d = {}",
            paths.dim(),
            model.state_dim()
        )));
    }
    Ok(())
}

fn require_scalar_c(diff: &DiffusionSpec) -> Result<f64> {
    match diff.scalar_sigma() {
        Some(s) => Ok(s * s),
        None => Err(Error::Unsupported(
            "closed-form normal equations require scalar diffusion".into(),
        )),
    }
}

/// Assemble the normal-equation statistics for a linear-in-θ family.
pub fn assemble_normal_equations(
    model: &dyn DriftModel,
    paths: &ParticlePaths,
) -> Result<NormalEquations> {
    if !model.linear_in_theta() {
        return Err(Error::Unsupported(format!(
            "{}: normal equations need a drift linear in theta",
            model.name()
        )));
    }
    check_paths(model, paths)?;
    let n = paths.n_particles();
    let d = paths.dim();
    let p = model.param_dim();
    let m = paths.grid().n_steps();
    let dt = paths.grid().dt();
    // Gradient rows are θ-free for linear families; evaluate at the box
    // center.
    let theta_c = model.param_box().center();

    let tri = p * (p + 1) / 2;
    let mut gram_buf = vec![0.0; n * tri];
    let mut mom_buf = vec![0.0; n * p];
    let mut col = vec![0.0; n];
    let mut gram_acc = vec![0.0; tri];
    let mut mom_acc = vec![0.0; p];

    for j in 0..m {
        let prev = paths.slice_at(j);
        let next = paths.slice_at(j + 1);
        let nu = paths.measure_at(j);
        let t = paths.grid().time(j);
        for i in 0..n {
            let x = &prev[i * d..(i + 1) * d];
            let xn = &next[i * d..(i + 1) * d];
            let mut grad = vec![0.0; d * p];
            model.drift_grad_into(&theta_c, t, x, &nu, &mut grad);
            let mut idx = 0;
            for r in 0..p {
                for c in r..p {
                    let mut s = 0.0;
                    for k in 0..d {
                        s += grad[k * p + r] * grad[k * p + c];
                    }
                    gram_buf[i * tri + idx] = s * dt;
                    idx += 1;
                }
                let mut s = 0.0;
                for k in 0..d {
                    s += grad[k * p + r] * (xn[k] - x[k]);
                }
                mom_buf[i * p + r] = s;
            }
        }
        for e in 0..tri {
            for i in 0..n {
                col[i] = gram_buf[i * tri + e];
            }
            gram_acc[e] += pairwise_sum(&col);
        }
        for q in 0..p {
            for i in 0..n {
                col[i] = mom_buf[i * p + q];
            }
            mom_acc[q] += pairwise_sum(&col);
        }
    }

    let mut a = DMatrix::zeros(p, p);
    let mut idx = 0;
    for r in 0..p {
        for c in r..p {
            a[(r, c)] = gram_acc[idx] / n as f64;
            a[(c, r)] = a[(r, c)];
            idx += 1;
        }
    }
    let b = DVector::from_iterator(p, mom_acc.iter().map(|v| v / n as f64));
    Ok(NormalEquations { a, b, n, m })
}

fn gram_degenerate(a: &DMatrix<f64>) -> (f64, f64) {
    let p = a.nrows() as f64;
    let det = a.clone().lu().determinant();
    let threshold = GRAM_RTOL * (a.trace() / p).max(0.0).powf(p);
    (det, threshold)
}

fn boundary_flags(model: &dyn DriftModel, theta: &[f64]) -> Vec<bool> {
    let pb = model.param_box();
    (0..theta.len())
        .map(|q| {
            let (lo, hi) = pb.interval(q);
            let tol = BOUNDARY_RTOL * (1.0 + lo.abs().max(hi.abs()));
            theta[q] <= lo + tol || theta[q] >= hi - tol
        })
        .collect()
}

/// Closed-form MLE for linear-in-θ families. If the unconstrained solution
/// leaves the parameter box it is clamped coordinatewise and the result is
/// flagged unconverged.
pub fn mle_linear(
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    paths: &ParticlePaths,
) -> Result<EstimateResult> {
    require_scalar_c(diff)?;
    let eqs = assemble_normal_equations(model, paths)?;
    let unconstrained = eqs.solve()?;
    let inside = model.param_box().contains(&unconstrained);
    let theta_hat = if inside { unconstrained } else { model.param_box().project(&unconstrained) };

    let loglik = log_likelihood_discrete(model, diff, &theta_hat, paths)?.value();
    let score = score_discrete(model, diff, &theta_hat, paths)?;
    let score_norm = score.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(EstimateResult {
        boundary_active: boundary_flags(model, &theta_hat),
        theta_hat,
        method: Method::Linear,
        converged: inside,
        iterations: 1,
        loglik,
        score_norm,
    })
}

/// Options for the numeric MLE.
#[derive(Debug, Clone)]
pub struct MleOptions {
    pub n_starts: usize,
    pub max_iter: usize,
    pub seed: u64,
    pub theta_init: Option<Vec<f64>>,
}

impl Default for MleOptions {
    fn default() -> Self {
        MleOptions { n_starts: 8, max_iter: 500, seed: 0x5eed, theta_init: None }
    }
}

/// Objective handed to the optimizer: full likelihood sweeps, or the
/// quadratic summary for linear families.
enum Objective<'a> {
    Quadratic { eqs: NormalEquations, c_inv: f64 },
    Full { model: &'a dyn DriftModel, diff: &'a DiffusionSpec, paths: &'a ParticlePaths },
}

impl Objective<'_> {
    fn eval(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self {
            Objective::Quadratic { eqs, c_inv } => {
                let ll = eqs.loglik(theta) * c_inv;
                let score = eqs.score(theta).iter().map(|v| v * c_inv).collect();
                Ok((ll, score))
            }
            Objective::Full { model, diff, paths } => {
                let (ll, score) = loglik_and_score(*model, diff, theta, paths)?;
                Ok((ll.value(), score))
            }
        }
    }
}

struct BfgsOutcome {
    theta: Vec<f64>,
    loglik: f64,
    converged: bool,
    iterations: usize,
}

/// Projected BFGS ascent inside the parameter box.
fn projected_bfgs(
    model: &dyn DriftModel,
    obj: &Objective<'_>,
    start: &[f64],
    max_iter: usize,
) -> Result<BfgsOutcome> {
    let p = start.len();
    let pb = model.param_box();
    let mut x = pb.project(start);
    let (mut fx, mut gx) = obj.eval(&x)?;
    let mut h = DMatrix::<f64>::identity(p, p);
    let mut fresh_h = true;
    let mut prev_active: Option<Vec<bool>> = None;
    let mut converged = false;
    let mut iterations = 0;

    let active_set = |x: &[f64], g: &[f64]| -> Vec<bool> {
        (0..p)
            .map(|q| {
                let (lo, hi) = pb.interval(q);
                let tol = BOUNDARY_RTOL * (1.0 + lo.abs().max(hi.abs()));
                (x[q] <= lo + tol && g[q] < 0.0) || (x[q] >= hi - tol && g[q] > 0.0)
            })
            .collect()
    };

    for iter in 0..max_iter {
        iterations = iter + 1;
        let active = active_set(&x, &gx);
        let mut pg = gx.clone();
        for q in 0..p {
            if active[q] {
                pg[q] = 0.0;
            }
        }
        let pg_norm = pg.iter().map(|v| v * v).sum::<f64>().sqrt();
        if pg_norm <= 1e-8 * (1.0 + fx.abs()) {
            converged = true;
            break;
        }
        if prev_active.as_ref().is_some_and(|a| *a != active) {
            h = DMatrix::identity(p, p);
            fresh_h = true;
        }
        prev_active = Some(active.clone());

        // Ascent direction from the inverse-Hessian approximation on the
        // free coordinates; fall back to the projected gradient when the
        // model direction loses ascent.
        let pg_v = DVector::from_column_slice(&pg);
        let mut dir = &h * &pg_v;
        for q in 0..p {
            if active[q] {
                dir[q] = 0.0;
            }
        }
        if dir.dot(&pg_v) <= 0.0 {
            dir = pg_v.clone();
        }

        // Armijo backtracking along the projected arc.
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let cand: Vec<f64> = (0..p).map(|q| x[q] + alpha * dir[q]).collect();
            let cand = pb.project(&cand);
            let shift: Vec<f64> = (0..p).map(|q| cand[q] - x[q]).collect();
            let pred: f64 = shift.iter().zip(gx.iter()).map(|(s, g)| s * g).sum();
            if shift.iter().all(|&s| s == 0.0) {
                break;
            }
            let (fc, gc) = obj.eval(&cand)?;
            if fc >= fx + 1e-4 * pred || (pred <= 0.0 && fc > fx) {
                accepted = Some((cand, fc, gc, shift));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, fn_, gn, shift)) = accepted else {
            // No productive step along this direction; declare converged
            // only if the projected gradient is already small at a looser
            // scale, otherwise report non-convergence.
            converged = pg_norm <= 1e-6 * (1.0 + fx.abs());
            break;
        };

        // BFGS update on the negated problem (descent on −ℓ): s = Δx,
        // y = −Δg. Skip when curvature degenerates.
        let s = DVector::from_column_slice(&shift);
        let y = DVector::from_iterator(p, (0..p).map(|q| gx[q] - gn[q]));
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh_h {
                // Shanno scaling: seed H with the Rayleigh curvature
                // estimate so the first quasi-Newton step has the right
                // magnitude.
                let yy = y.dot(&y);
                if yy > 0.0 {
                    h = DMatrix::identity(p, p) * (sy / yy);
                }
                fresh_h = false;
            }
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            let rho = 1.0 / sy;
            // H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ
            let sh = &s * hy.transpose();
            h = &h - (&sh + sh.transpose()) * rho
                + (&s * s.transpose()) * (rho * rho * yhy + rho);
        }

        x = xn;
        fx = fn_;
        gx = gn;
    }

    Ok(BfgsOutcome { theta: x, loglik: fx, converged, iterations })
}

/// Numeric MLE: projected BFGS with seeded multi-starts. Linear families
/// ride a quadratic fast path built from the normal equations.
pub fn mle_numeric(
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    paths: &ParticlePaths,
    opts: &MleOptions,
) -> Result<EstimateResult> {
    check_paths(model, paths)?;
    if opts.n_starts == 0 {
        return Err(Error::Domain("mle: need at least one start".into()));
    }
    if let Some(init) = &opts.theta_init {
        validate_theta(model, init).map_err(|v| {
            Error::Domain(format!(
                "mle: invalid theta_init: {}",
                v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
            ))
        })?;
    }

    let objective = if model.linear_in_theta() {
        let c_inv = 1.0 / require_scalar_c(diff)?;
        let eqs = assemble_normal_equations(model, paths)?;
        let (det, threshold) = gram_degenerate(&eqs.a);
        if !(det > threshold) {
            return Err(Error::Singular {
                det,
                threshold,
                note: Some("normal-equation Gram matrix".into()),
            });
        }
        Objective::Quadratic { eqs, c_inv }
    } else {
        Objective::Full { model, diff, paths }
    };

    let pb = model.param_box();
    let mut starts: Vec<Vec<f64>> = Vec::with_capacity(opts.n_starts);
    starts.push(opts.theta_init.clone().unwrap_or_else(|| pb.center()));
    if starts.len() < opts.n_starts {
        let center = pb.center();
        if starts[0] != center {
            starts.push(center);
        }
    }
    let mut rng = StreamRng::new(opts.seed, &[0x4d4c45]);
    while starts.len() < opts.n_starts {
        starts.push(pb.sample(&mut rng));
    }

    // Starts run in parallel; the winner is picked by (likelihood,
    // lowest start index), which is schedule-independent.
    let outcomes: Vec<Result<BfgsOutcome>> = if matches!(objective, Objective::Full { .. }) {
        starts
            .par_iter()
            .map(|start| projected_bfgs(model, &objective, start, opts.max_iter))
            .collect()
    } else {
        starts.iter().map(|start| projected_bfgs(model, &objective, start, opts.max_iter)).collect()
    };
    let mut best: Option<(BfgsOutcome, usize)> = None;
    for (idx, out) in outcomes.into_iter().enumerate() {
        let out = out?;
        let better = match &best {
            None => true,
            Some((b, _)) => out.loglik > b.loglik,
        };
        if better {
            best = Some((out, idx));
        }
    }
    let (out, _) = best.expect("at least one start");

    // Final diagnostics at θ̂ against the true likelihood (not the
    // quadratic proxy).
    let loglik = log_likelihood_discrete(model, diff, &out.theta, paths)?.value();
    let score = score_discrete(model, diff, &out.theta, paths)?;
    let score_norm = score.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(EstimateResult {
        boundary_active: boundary_flags(model, &out.theta),
        theta_hat: out.theta,
        method: Method::Numeric,
        converged: out.converged,
        iterations: out.iterations,
        loglik,
        score_norm,
    })
}

/// Standardized estimation error `√N · I^{1/2} (θ̂ − θ*)`. Errors if the
/// information matrix is numerically degenerate.
pub fn standardized_error(
    theta_hat: &[f64],
    theta_star: &[f64],
    fisher: &FisherMatrix,
    n: usize,
) -> Result<Vec<f64>> {
    let p = fisher.dim();
    if theta_hat.len() != p || theta_star.len() != p {
        return Err(Error::Shape(format!(
            "standardized error: lengths {}/{} vs fisher dim {p}",
            theta_hat.len(),
            theta_star.len()
        )));
    }
    if fisher.is_degenerate() {
        return Err(Error::Singular {
            det: fisher.det(),
            threshold: fisher.degeneracy_threshold(),
            note: Some("standardization needs nondegenerate information".into()),
        });
    }
    let root = fisher.sqrt_psd()?;
    let diff = DVector::from_iterator(p, (0..p).map(|q| theta_hat[q] - theta_star[q]));
    let out = root * diff * (n as f64).sqrt();
    Ok(out.iter().cloned().collect())
}

/// Convenience: empirical-Fisher-standardized error of an estimate.
pub fn standardized_error_empirical(
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    theta_hat: &[f64],
    theta_star: &[f64],
    paths: &ParticlePaths,
) -> Result<Vec<f64>> {
    let fisher = empirical_fisher(model, diff, theta_star, paths)?;
    standardized_error(theta_hat, theta_star, &fisher, paths.n_particles())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::FisherKind;
    use crate::models::{build_model, ModelSpec};
    use crate::simulate::{simulate_particles, InitialLaw, ParticlePaths, TimeGrid};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn ou_model() -> Arc<dyn DriftModel> {
        let spec = ModelSpec::new("mckean_ou", vec![-2.0, 0.0, 0.1], vec![-0.5, 2.0, 1.0]);
        build_model(&spec).unwrap()
    }

    fn linear_model() -> Arc<dyn DriftModel> {
        let mut spec = ModelSpec::new("gen_linear", vec![-3.0, -3.0], vec![3.0, 3.0]);
        spec.kernel_f = Some("identity".into());
        spec.kernel_g = Some("gaussian_bump".into());
        build_model(&spec).unwrap()
    }

    /// Literal dense assembly + Gaussian elimination, no shortcuts.
    fn brute_mle(model: &dyn DriftModel, paths: &ParticlePaths) -> Vec<f64> {
        let n = paths.n_particles();
        let d = paths.dim();
        let p = model.param_dim();
        let dt = paths.grid().dt();
        let theta_c = model.param_box().center();
        let mut a = vec![vec![0.0; p]; p];
        let mut b = vec![0.0; p];
        for j in 0..paths.grid().n_steps() {
            let nu = paths.measure_at(j);
            for i in 0..n {
                let x = paths.state(j, i);
                let xn = paths.state(j + 1, i);
                let mut grad = vec![0.0; d * p];
                model.drift_grad_into(&theta_c, paths.grid().time(j), x, &nu, &mut grad);
                for r in 0..p {
                    for c in 0..p {
                        for k in 0..d {
                            a[r][c] += grad[k * p + r] * grad[k * p + c] * dt;
                        }
                    }
                    for k in 0..d {
                        b[r] += grad[k * p + r] * (xn[k] - x[k]);
                    }
                }
            }
        }
        // Gaussian elimination with partial pivoting.
        let mut aug: Vec<Vec<f64>> = (0..p)
            .map(|r| {
                let mut row = a[r].clone();
                row.push(b[r]);
                row
            })
            .collect();
        for col in 0..p {
            let pivot = (col..p).max_by(|&r1, &r2| aug[r1][col].abs().total_cmp(&aug[r2][col].abs())).unwrap();
            aug.swap(col, pivot);
            let pv = aug[col][col];
            for r in 0..p {
                if r == col {
                    continue;
                }
                let f = aug[r][col] / pv;
                for c in col..=p {
                    aug[r][c] -= f * aug[col][c];
                }
            }
        }
        (0..p).map(|r| aug[r][p] / aug[r][r]).collect()
    }

    fn ou_paths(theta: &[f64], n: usize, m: usize, seed: u64) -> ParticlePaths {
        let model = ou_model();
        let diff = DiffusionSpec::identity(1);
        let grid = TimeGrid::uniform(1.0, m).unwrap();
        simulate_particles(
            model.as_ref(),
            &diff,
            theta,
            n,
            &grid,
            &InitialLaw::gaussian(0.0, 0.5),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn mle_linear_matches_brute_force_many_instances() {
        let diff = DiffusionSpec::identity(1);
        for seed in 0..10u64 {
            let model = ou_model();
            let n = 8 + (seed as usize % 5) * 3;
            let m = 6 + (seed as usize % 4) * 4;
            let paths = ou_paths(&[-1.2, 0.4, 0.5], n, m, 100 + seed);
            let fast = mle_linear(model.as_ref(), &diff, &paths).unwrap();
            let brute = brute_mle(model.as_ref(), &paths);
            // Compare the unconstrained solution (clamping may kick in at
            // these small sizes; skip those draws).
            if model.param_box().contains(&brute) {
                for q in 0..3 {
                    assert_relative_eq!(fast.theta_hat[q], brute[q], max_relative = 1e-10);
                }
                assert!(fast.converged);
            }
        }
        for seed in 0..10u64 {
            let model = linear_model();
            let grid = TimeGrid::uniform(0.8, 9).unwrap();
            let paths = simulate_particles(
                model.as_ref(),
                &diff,
                &[-0.6, 0.9],
                12,
                &grid,
                &InitialLaw::gaussian(0.3, 0.4),
                200 + seed,
            )
            .unwrap();
            let fast = mle_linear(model.as_ref(), &diff, &paths).unwrap();
            let brute = brute_mle(model.as_ref(), &paths);
            if model.param_box().contains(&brute) {
                for q in 0..2 {
                    assert_relative_eq!(fast.theta_hat[q], brute[q], max_relative = 1e-10);
                }
            }
        }
    }

    #[test]
    fn gram_equals_empirical_fisher_for_unit_c() {
        let model = ou_model();
        let diff = DiffusionSpec::identity(1);
        let paths = ou_paths(&[-1.0, 0.5, 0.5], 25, 12, 7);
        let eqs = assemble_normal_equations(model.as_ref(), &paths).unwrap();
        let fisher = empirical_fisher(model.as_ref(), &diff, &[-1.0, 0.5, 0.5], &paths).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert_relative_eq!(eqs.gram()[(r, c)], fisher.entry(r, c), max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn quadratic_score_identity() {
        let model = ou_model();
        let diff = DiffusionSpec::identity(1);
        let paths = ou_paths(&[-1.0, 0.5, 0.5], 18, 10, 13);
        let eqs = assemble_normal_equations(model.as_ref(), &paths).unwrap();
        let theta = [-0.8, 0.7, 0.4];
        let via_eqs = eqs.score(&theta);
        let direct = score_discrete(model.as_ref(), &diff, &theta, &paths).unwrap();
        for q in 0..3 {
            assert_relative_eq!(via_eqs[q], direct[q], epsilon = 1e-9, max_relative = 1e-9);
        }
        // And at the interior MLE the score vanishes at solver precision.
        let est = mle_linear(model.as_ref(), &diff, &paths).unwrap();
        if est.converged {
            let s = score_discrete(model.as_ref(), &diff, &est.theta_hat, &paths).unwrap();
            let scale = 1.0 + est.loglik.abs();
            for q in 0..3 {
                assert!(s[q].abs() <= 1e-8 * scale, "score[{q}] = {}", s[q]);
            }
        }
    }

    #[test]
    fn constant_paths_are_singular() {
        let model = ou_model();
        let diff = DiffusionSpec::identity(1);
        let grid = TimeGrid::uniform(1.0, 5).unwrap();
        let n = 6;
        // All particles glued to the same constant: Gram rank 1.
        let data = vec![0.7; (5 + 1) * n];
        let paths = ParticlePaths::from_parts(
            n,
            1,
            grid,
            data,
            0,
            "mckean_ou".into(),
            vec![-1.0, 0.5, 0.5],
        )
        .unwrap();
        match mle_linear(model.as_ref(), &diff, &paths) {
            Err(Error::Singular { det, threshold, .. }) => {
                assert!(det <= threshold, "det {det} vs threshold {threshold}");
            }
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn mle_recovers_truth_at_scale() {
        let model = ou_model();
        let diff = DiffusionSpec::identity(1);
        let theta_star = [-1.0, 1.0, 0.5];
        let paths = ou_paths(&theta_star, 2000, 400, 42);
        let est = mle_linear(model.as_ref(), &diff, &paths).unwrap();
        assert!(est.converged);
        let mom = crate::simulate::OuMoments::new(&theta_star, 0.0, 0.5).unwrap();
        let fisher = crate::likelihood::ou_limit_fisher(&mom, paths.grid()).unwrap();
        let inv = fisher.matrix().clone().try_inverse().unwrap();
        let band = 5.0 * (inv.trace() / 2000.0).sqrt();
        let err: f64 = est
            .theta_hat
            .iter()
            .zip(theta_star)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(err <= band, "error {err} vs band {band}");
        assert!(est.boundary_active.iter().all(|&b| !b));
    }

    #[test]
    fn scaling_equivariance_of_normal_equations() {
        let model = ou_model();
        let paths = ou_paths(&[-1.0, 1.0, 0.5], 40, 20, 3);
        let eqs = assemble_normal_equations(model.as_ref(), &paths).unwrap();
        let sol = eqs.solve().unwrap();
        for k in [0.25, 3.0, 1e4] {
            let scaled = NormalEquations {
                a: eqs.a.clone() * k,
                b: eqs.b.clone() * k,
                n: eqs.n,
                m: eqs.m,
            };
            let sol_k = scaled.solve().unwrap();
            for q in 0..3 {
                assert_relative_eq!(sol[q], sol_k[q], max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let model = ou_model();
        let diff = DiffusionSpec::identity(1);
        let paths = ou_paths(&[-1.0, 0.8, 0.6], 15, 8, 77);
        let est = mle_linear(model.as_ref(), &diff, &paths).unwrap();
        let n = paths.n_particles();
        let m = paths.grid().n_steps();
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 2) % n).collect();
        let mut data = Vec::with_capacity((m + 1) * n);
        for j in 0..=m {
            for &src in &perm {
                data.extend_from_slice(paths.state(j, src));
            }
        }
        let permuted = ParticlePaths::from_parts(
            n,
            1,
            paths.grid().clone(),
            data,
            paths.seed(),
            paths.model_name().into(),
            paths.theta().to_vec(),
        )
        .unwrap();
        let est2 = mle_linear(model.as_ref(), &diff, &permuted).unwrap();
        for q in 0..3 {
            assert_relative_eq!(est.theta_hat[q], est2.theta_hat[q], max_relative = 1e-10);
        }
    }

    #[test]
    fn numeric_agrees_with_linear_on_quadratic_families() {
        // Scale chosen so the unconstrained optimum sits well inside the
        // box; on boundary instances the clamped closed form and the
        // constrained optimizer legitimately differ.
        let model = ou_model();
        let diff = DiffusionSpec::identity(1);
        let paths = ou_paths(&[-1.0, 1.0, 0.5], 1500, 150, 5);
        let lin = mle_linear(model.as_ref(), &diff, &paths).unwrap();
        assert!(lin.converged, "interior instance expected: {:?}", lin.theta_hat);
        let num = mle_numeric(model.as_ref(), &diff, &paths, &MleOptions::default()).unwrap();
        assert!(num.converged);
        for q in 0..3 {
            assert!(
                (lin.theta_hat[q] - num.theta_hat[q]).abs() <= 1e-6 * (1.0 + lin.theta_hat[q].abs()),
                "coord {q}: {} vs {}",
                lin.theta_hat[q],
                num.theta_hat[q]
            );
        }
        // Scalar-but-nonunit diffusion leaves the argmax unchanged.
        let diff2 = DiffusionSpec::scalar(1, 1.7).unwrap();
        let num2 = mle_numeric(model.as_ref(), &diff2, &paths, &MleOptions::default()).unwrap();
        for q in 0..3 {
            assert!((num.theta_hat[q] - num2.theta_hat[q]).abs() <= 1e-6);
        }
    }

    #[test]
    fn numeric_mle_stays_in_box_and_flags_boundary() {
        // Data generated well outside what the (tight) box can express:
        // the optimum pins to the boundary and is flagged.
        let spec = ModelSpec::new("mckean_ou", vec![-0.4, 0.0, 0.1], vec![-0.2, 0.1, 0.2]);
        let model = build_model(&spec).unwrap();
        let gen_spec = ModelSpec::new("mckean_ou", vec![-2.0, 0.0, 0.1], vec![-0.5, 2.0, 1.0]);
        let gen_model = build_model(&gen_spec).unwrap();
        let diff = DiffusionSpec::identity(1);
        let grid = TimeGrid::uniform(1.0, 100).unwrap();
        let paths = simulate_particles(
            gen_model.as_ref(),
            &diff,
            &[-1.5, 1.5, 0.8],
            500,
            &grid,
            &InitialLaw::gaussian(0.0, 0.5),
            9,
        )
        .unwrap();
        let est = mle_numeric(model.as_ref(), &diff, &paths, &MleOptions::default()).unwrap();
        assert!(model.param_box().contains(&est.theta_hat));
        assert!(est.boundary_active.iter().any(|&b| b), "expected an active bound: {est:?}");
        // Same story for the closed form: clamped and unconverged.
        let lin = mle_linear(model.as_ref(), &diff, &paths).unwrap();
        assert!(!lin.converged);
        assert!(model.param_box().contains(&lin.theta_hat));
    }

    #[test]
    fn double_layer_recovery_reduced_scale() {
        let spec = ModelSpec::new(
            "double_layer",
            vec![0.5, 0.3, 0.5, 1.5],
            vec![1.5, 0.8, 1.5, 3.0],
        );
        let model = build_model(&spec).unwrap();
        let diff = DiffusionSpec::identity(1);
        let theta_star = [1.0, 0.5, 1.0, 2.0];
        let grid = TimeGrid::uniform(1.0, 120).unwrap();
        let paths = simulate_particles(
            model.as_ref(),
            &diff,
            &theta_star,
            128,
            &grid,
            &InitialLaw::gaussian(0.0, 1.0),
            31,
        )
        .unwrap();
        let opts = MleOptions {
            n_starts: 2,
            max_iter: 300,
            seed: 77,
            theta_init: Some(vec![0.8, 0.6, 0.8, 2.4]),
        };
        let est = mle_numeric(model.as_ref(), &diff, &paths, &opts).unwrap();
        // Optimizer sanity: at least as good as the truth.
        let ll_star = log_likelihood_discrete(model.as_ref(), &diff, &theta_star, &paths)
            .unwrap()
            .value();
        assert!(
            est.loglik >= ll_star - 1e-6,
            "loglik {} below truth {ll_star}",
            est.loglik
        );
        // Recovery within a generous information band at this small scale.
        let fisher = empirical_fisher(model.as_ref(), &diff, &est.theta_hat, &paths).unwrap();
        if let Some(inv) = fisher.matrix().clone().try_inverse() {
            let band = 5.0 * (inv.trace().abs() / 128.0).sqrt();
            let err: f64 = est
                .theta_hat
                .iter()
                .zip(theta_star)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(err <= band.max(0.5), "error {err} vs band {band}");
        }
    }

    #[test]
    fn estimation_error_sharpens_with_n() {
        // Spread-out initial cloud over a longer horizon: every level has
        // enough information that the box never binds, so the error decay
        // is the clean 1/√N.
        let model = ou_model();
        let diff = DiffusionSpec::identity(1);
        let theta_star = [-1.0, 1.0, 0.5];
        let grid = TimeGrid::uniform(2.0, 100).unwrap();
        let mu0 = InitialLaw::gaussian(0.0, 2.0);
        let reps = 20;
        let mut medians = Vec::new();
        for (lvl, n) in [250usize, 1000, 4000].into_iter().enumerate() {
            let mut errs = Vec::new();
            for rep in 0..reps {
                let seed = 1000 + (lvl * reps + rep) as u64;
                let paths = simulate_particles(
                    model.as_ref(),
                    &diff,
                    &theta_star,
                    n,
                    &grid,
                    &mu0,
                    seed,
                )
                .unwrap();
                let est = mle_linear(model.as_ref(), &diff, &paths).unwrap();
                let err: f64 = est
                    .theta_hat
                    .iter()
                    .zip(theta_star)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                errs.push(err);
            }
            medians.push(crate::stats::median(&errs));
        }
        // Quadrupling N should halve the median error: accept [0.3, 0.8].
        for w in medians.windows(2) {
            let ratio = w[1] / w[0];
            assert!(w[1] < w[0], "medians not decreasing: {medians:?}");
            assert!(
                (0.3..=0.8).contains(&ratio),
                "sharpening ratio {ratio} (medians {medians:?})"
            );
        }
    }

    #[test]
    fn standardized_error_scalar_example() {
        let fisher = FisherMatrix::new(
            FisherKind::ClosedForm,
            DMatrix::from_row_slice(1, 1, &[4.0]),
        )
        .unwrap();
        let z = standardized_error(&[0.55], &[0.5], &fisher, 100).unwrap();
        assert_relative_eq!(z[0], 1.0, max_relative = 1e-12);
        // Degenerate information refuses to standardize.
        let deg = FisherMatrix::new(FisherKind::ClosedForm, DMatrix::from_row_slice(1, 1, &[0.0]))
            .unwrap();
        assert!(standardized_error(&[0.55], &[0.5], &deg, 100).is_err());
    }
}
