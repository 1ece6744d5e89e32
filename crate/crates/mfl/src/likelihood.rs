//! Discretized Girsanov log-likelihood, score, and Fisher information.
//!
//! Against the driftless reference measure, the log-likelihood of the
//! observed particle paths is the left-endpoint Itô discretization
//!
//! ```text
//! ℓ(θ) = Σ_{i≤N} Σ_{j<m} [ (c⁻¹ b^i_j)ᵀ ΔX^i_j − ½ (b^i_j)ᵀ c⁻¹ b^i_j Δt ]
//! ```
//!
//! with `b^i_j = b(θ; t_j, X^i_{t_j}, μ^(N)_{t_j})` and `c = σσᵀ`. The sum
//! is over all particles (unnormalized); [`LikelihoodValue::per_particle`]
//! divides by N. The score stacks `∇_θ b` the same way:
//!
//! ```text
//! score(θ) = Σ_{i,j} [ (∇b)ᵀ c⁻¹ ΔX − (∇b)ᵀ c⁻¹ b Δt ]
//! ```
//!
//! Fisher information comes in three flavors: the empirical per-particle
//! Gram matrix `(1/N) Σ_{i,j} (∇b)ᵀ c⁻¹ ∇b Δt`, a quadrature of the same
//! Gram against a reference flow (the large-N limit), and closed-form
//! quadrature for the mean-field OU family.
//!
//! All reductions run per-particle partials through a fixed-shape pairwise
//! sum, so results are bit-identical across thread counts.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::diffusion::DiffusionSpec;
use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::models::{validate_theta, DriftModel};
use crate::simulate::{MeasureFlow, OuMoments, ParticlePaths, TimeGrid};
use crate::stats::pairwise_sum;

/// Relative determinant floor: a Fisher matrix with `det < 1e-12·(tr/p)^p`
/// is treated as numerically degenerate.
pub const DEGENERACY_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FisherKind {
    /// Per-particle Gram of observed paths.
    Empirical,
    /// Quadrature against a reference flow.
    Limit,
    /// Closed-form OU quadrature.
    ClosedForm,
}

/// Symmetric positive semi-definite information matrix.
#[derive(Debug, Clone)]
pub struct FisherMatrix {
    kind: FisherKind,
    mat: DMatrix<f64>,
}

impl FisherMatrix {
    pub fn new(kind: FisherKind, mat: DMatrix<f64>) -> Result<Self> {
        if !mat.is_square() {
            return Err(Error::Shape(format!("fisher: non-square {}×{}", mat.nrows(), mat.ncols())));
        }
        if mat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("fisher: non-finite entry".into()));
        }
        let scale = mat.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
        for r in 0..mat.nrows() {
            for c in 0..r {
                if (mat[(r, c)] - mat[(c, r)]).abs() > 1e-10 * scale {
                    return Err(Error::Domain(format!(
                        "fisher: asymmetric at ({r},{c}): {} vs {}",
                        mat[(r, c)],
                        mat[(c, r)]
                    )));
                }
            }
        }
        // Exact symmetrization so downstream eigen-solves see a symmetric
        // matrix bit-for-bit.
        let sym = (&mat + mat.transpose()) * 0.5;
        let eig = sym.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
            return Err(Error::Domain(format!(
                "fisher: negative eigenvalue {:.3e} (scale {scale:.3e})",
                eig.eigenvalues.min()
            )));
        }
        Ok(FisherMatrix { kind, mat: sym })
    }

    pub fn kind(&self) -> FisherKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn entry(&self, r: usize, c: usize) -> f64 {
        self.mat[(r, c)]
    }

    pub fn det(&self) -> f64 {
        self.mat.clone().lu().determinant()
    }

    pub fn trace(&self) -> f64 {
        self.mat.trace()
    }

    /// Scale-aware degeneracy threshold `1e-12 · (trace/p)^p`.
    pub fn degeneracy_threshold(&self) -> f64 {
        let p = self.dim() as f64;
        let mean_eig = (self.trace() / p).max(0.0);
        DEGENERACY_RTOL * mean_eig.powf(p)
    }

    pub fn is_degenerate(&self) -> bool {
        let th = self.degeneracy_threshold();
        th == 0.0 || self.det() < th
    }

    fn eigen_fn(&self, f: impl Fn(f64) -> Option<f64>, what: &str) -> Result<DMatrix<f64>> {
        let eig = self.mat.clone().symmetric_eigen();
        let mut diag = DMatrix::zeros(self.dim(), self.dim());
        for (k, &l) in eig.eigenvalues.iter().enumerate() {
            match f(l.max(0.0)) {
                Some(v) => diag[(k, k)] = v,
                None => {
                    return Err(Error::Singular {
                        det: self.det(),
                        threshold: self.degeneracy_threshold(),
                        note: Some(format!("{what}: eigenvalue {l:.3e} too small")),
                    })
                }
            }
        }
        Ok(&eig.eigenvectors * diag * eig.eigenvectors.transpose())
    }

    /// Symmetric PSD square root.
    pub fn sqrt_psd(&self) -> Result<DMatrix<f64>> {
        self.eigen_fn(|l| Some(l.sqrt()), "fisher sqrt")
    }

    /// Symmetric inverse square root; errors if the matrix is degenerate.
    pub fn inv_sqrt_psd(&self) -> Result<DMatrix<f64>> {
        if self.is_degenerate() {
            return Err(Error::Singular {
                det: self.det(),
                threshold: self.degeneracy_threshold(),
                note: Some("fisher inverse square root".into()),
            });
        }
        let floor = DEGENERACY_RTOL * (self.trace() / self.dim() as f64).max(1e-300);
        self.eigen_fn(
            |l| if l > floor { Some(1.0 / l.sqrt()) } else { None },
            "fisher inverse sqrt",
        )
    }
}

/// Unnormalized log-likelihood value with its evaluation context.
#[derive(Debug, Clone)]
pub struct LikelihoodValue {
    value: f64,
    theta: Vec<f64>,
    n: usize,
    m: usize,
}

impl LikelihoodValue {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn n_particles(&self) -> usize {
        self.n
    }

    pub fn n_steps(&self) -> usize {
        self.m
    }

    /// Likelihood per particle (value / N).
    pub fn per_particle(&self) -> f64 {
        self.value / self.n as f64
    }
}

fn check_setup(model: &dyn DriftModel, diff: &DiffusionSpec, theta: &[f64], paths: &ParticlePaths) -> Result<()> {
    validate_theta(model, theta).map_err(|v| {
        Error::Domain(format!(
            "{}: invalid parameter: {}",
            model.name(),
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
        ))
    })?;
    if paths.dim() != model.state_dim() {
        return Err(Error::Shape(format!(
            "likelihood: paths dimension {} vs model d = {}",
            paths.dim(),
            model.state_dim()
        )));
    }
    if diff.dim() != model.state_dim() {
        return Err(Error::Shape(format!(
            "likelihood: diffusion dimension {} vs model d = {}",
            diff.dim(),
            model.state_dim()
        )));
    }
    Ok(())
}

const PAR_THRESHOLD: usize = 2048;

/// Evaluate one per-particle contribution at step j and write it into the
/// accumulator row. `want` selects value / score / both.
struct StepAccum<'a> {
    value: Option<&'a mut [f64]>,
    score: Option<&'a mut [f64]>,
}

fn step_terms(
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    theta: &[f64],
    t: f64,
    dt: f64,
    prev: &[f64],
    next: &[f64],
    nu: &EmpiricalMeasure,
    accum: &mut StepAccum<'_>,
) {
    let d = model.state_dim();
    let p = model.param_dim();
    let n = nu.n_atoms();
    let want_score = accum.score.is_some();

    let eval_one = |i: usize, val_out: Option<&mut f64>, score_out: Option<&mut [f64]>| {
        let x = &prev[i * d..(i + 1) * d];
        let xn = &next[i * d..(i + 1) * d];
        let mut b = vec![0.0; d];
        let mut w = vec![0.0; d];
        let mut grad = vec![0.0; d * p];
        if want_score {
            model.drift_and_grad_into(theta, t, x, nu, &mut b, &mut grad);
        } else {
            model.drift_into(theta, t, x, nu, &mut b);
        }
        diff.apply_c_inv(&b, &mut w);
        if let Some(v) = val_out {
            let mut acc = 0.0;
            for k in 0..d {
                let dx = xn[k] - x[k];
                acc += w[k] * dx - 0.5 * b[k] * w[k] * dt;
            }
            *v = acc;
        }
        if let Some(s) = score_out {
            // (∇b)ᵀ c⁻¹ (ΔX − b Δt); rows of grad are states, columns θ.
            let mut cg = vec![0.0; d];
            for q in 0..p {
                for k in 0..d {
                    cg[k] = grad[k * p + q];
                }
                let mut wg = vec![0.0; d];
                diff.apply_c_inv(&cg, &mut wg);
                let mut acc = 0.0;
                for k in 0..d {
                    let dx = xn[k] - x[k];
                    acc += wg[k] * (dx - b[k] * dt);
                }
                s[q] = acc;
            }
        }
    };

    match (accum.value.as_deref_mut(), accum.score.as_deref_mut()) {
        (Some(vals), Some(scores)) => {
            if n >= PAR_THRESHOLD {
                vals.par_iter_mut()
                    .zip(scores.par_chunks_mut(p))
                    .enumerate()
                    .for_each(|(i, (v, s))| eval_one(i, Some(v), Some(s)));
            } else {
                for (i, (v, s)) in vals.iter_mut().zip(scores.chunks_mut(p)).enumerate() {
                    eval_one(i, Some(v), Some(s));
                }
            }
        }
        (Some(vals), None) => {
            if n >= PAR_THRESHOLD {
                vals.par_iter_mut().enumerate().for_each(|(i, v)| eval_one(i, Some(v), None));
            } else {
                for (i, v) in vals.iter_mut().enumerate() {
                    eval_one(i, Some(v), None);
                }
            }
        }
        (None, Some(scores)) => {
            if n >= PAR_THRESHOLD {
                scores.par_chunks_mut(p).enumerate().for_each(|(i, s)| eval_one(i, None, Some(s)));
            } else {
                for (i, s) in scores.chunks_mut(p).enumerate() {
                    eval_one(i, None, Some(s));
                }
            }
        }
        (None, None) => {}
    }
}

fn sweep(
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    theta: &[f64],
    paths: &ParticlePaths,
    want_value: bool,
    want_score: bool,
) -> Result<(f64, Vec<f64>)> {
    check_setup(model, diff, theta, paths)?;
    let n = paths.n_particles();
    let p = model.param_dim();
    let m = paths.grid().n_steps();
    let dt = paths.grid().dt();

    let mut val_buf = vec![0.0; if want_value { n } else { 0 }];
    let mut score_buf = vec![0.0; if want_score { n * p } else { 0 }];
    let mut col_buf = vec![0.0; if want_score { n } else { 0 }];
    let mut total_value = 0.0;
    let mut total_score = vec![0.0; p];

    for j in 0..m {
        let prev = paths.slice_at(j);
        let next = paths.slice_at(j + 1);
        let nu = paths.measure_at(j);
        let t = paths.grid().time(j);
        let mut accum = StepAccum {
            value: if want_value { Some(&mut val_buf) } else { None },
            score: if want_score { Some(&mut score_buf) } else { None },
        };
        step_terms(model, diff, theta, t, dt, prev, next, &nu, &mut accum);
        if want_value {
            total_value += pairwise_sum(&val_buf);
        }
        if want_score {
            for q in 0..p {
                for i in 0..n {
                    col_buf[i] = score_buf[i * p + q];
                }
                total_score[q] += pairwise_sum(&col_buf);
            }
        }
    }
    Ok((total_value, total_score))
}

/// Discretized Girsanov log-likelihood (sum over all particles).
pub fn log_likelihood_discrete(
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    theta: &[f64],
    paths: &ParticlePaths,
) -> Result<LikelihoodValue> {
    let (value, _) = sweep(model, diff, theta, paths, true, false)?;
    Ok(LikelihoodValue {
        value,
        theta: theta.to_vec(),
        n: paths.n_particles(),
        m: paths.grid().n_steps(),
    })
}

/// Score (gradient of the log-likelihood in θ).
pub fn score_discrete(
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    theta: &[f64],
    paths: &ParticlePaths,
) -> Result<Vec<f64>> {
    let (_, score) = sweep(model, diff, theta, paths, false, true)?;
    Ok(score)
}

/// Log-likelihood and score in one pass over the paths.
pub fn loglik_and_score(
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    theta: &[f64],
    paths: &ParticlePaths,
) -> Result<(LikelihoodValue, Vec<f64>)> {
    let (value, score) = sweep(model, diff, theta, paths, true, true)?;
    Ok((
        LikelihoodValue {
            value,
            theta: theta.to_vec(),
            n: paths.n_particles(),
            m: paths.grid().n_steps(),
        },
        score,
    ))
}

/// ℓ(θ′) − ℓ(θ) computed in a single pass: per-(i,j) differences are
/// summed directly, so the O(N) magnitudes of the two likelihoods never
/// meet in a subtraction.
pub fn log_likelihood_ratio(
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    theta: &[f64],
    theta_prime: &[f64],
    paths: &ParticlePaths,
) -> Result<f64> {
    check_setup(model, diff, theta, paths)?;
    check_setup(model, diff, theta_prime, paths)?;
    let n = paths.n_particles();
    let d = paths.dim();
    let m = paths.grid().n_steps();
    let dt = paths.grid().dt();

    let mut buf = vec![0.0; n];
    let mut total = 0.0;
    for j in 0..m {
        let prev = paths.slice_at(j);
        let next = paths.slice_at(j + 1);
        let nu = paths.measure_at(j);
        let t = paths.grid().time(j);
        let eval_one = |i: usize, out: &mut f64| {
            let x = &prev[i * d..(i + 1) * d];
            let xn = &next[i * d..(i + 1) * d];
            let mut b0 = vec![0.0; d];
            let mut b1 = vec![0.0; d];
            let mut w0 = vec![0.0; d];
            let mut w1 = vec![0.0; d];
            model.drift_into(theta, t, x, &nu, &mut b0);
            model.drift_into(theta_prime, t, x, &nu, &mut b1);
            diff.apply_c_inv(&b0, &mut w0);
            diff.apply_c_inv(&b1, &mut w1);
            let mut acc = 0.0;
            for k in 0..d {
                let dx = xn[k] - x[k];
                acc += (w1[k] - w0[k]) * dx - 0.5 * (b1[k] * w1[k] - b0[k] * w0[k]) * dt;
            }
            *out = acc;
        };
        if n >= PAR_THRESHOLD {
            buf.par_iter_mut().enumerate().for_each(|(i, v)| eval_one(i, v));
        } else {
            for (i, v) in buf.iter_mut().enumerate() {
                eval_one(i, v);
            }
        }
        total += pairwise_sum(&buf);
    }
    Ok(total)
}

/// Per-particle empirical Fisher information
/// `(1/N) Σ_{i,j} (∇b)ᵀ c⁻¹ (∇b) Δt` at θ.
pub fn empirical_fisher(
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    theta: &[f64],
    paths: &ParticlePaths,
) -> Result<FisherMatrix> {
    check_setup(model, diff, theta, paths)?;
    let n = paths.n_particles();
    let d = paths.dim();
    let p = model.param_dim();
    let m = paths.grid().n_steps();
    let dt = paths.grid().dt();

    // Per-particle Gram rows (upper triangle packed), pairwise-summed per
    // step for thread-count-independent bytes.
    let tri = p * (p + 1) / 2;
    let mut buf = vec![0.0; n * tri];
    let mut col = vec![0.0; n];
    let mut acc = vec![0.0; tri];

    for j in 0..m {
        let prev = paths.slice_at(j);
        let nu = paths.measure_at(j);
        let t = paths.grid().time(j);
        let eval_one = |i: usize, out: &mut [f64]| {
            let x = &prev[i * d..(i + 1) * d];
            let mut grad = vec![0.0; d * p];
            model.drift_grad_into(theta, t, x, &nu, &mut grad);
            // w = c⁻¹ ∇b columns
            let mut gq = vec![0.0; d];
            let mut wq = vec![0.0; d * p];
            for q in 0..p {
                for k in 0..d {
                    gq[k] = grad[k * p + q];
                }
                diff.apply_c_inv(&gq, &mut wq[q * d..(q + 1) * d]);
            }
            let mut idx = 0;
            for r in 0..p {
                for c in r..p {
                    let mut s = 0.0;
                    for k in 0..d {
                        s += grad[k * p + r] * wq[c * d + k];
                    }
                    out[idx] = s * dt;
                    idx += 1;
                }
            }
        };
        if n >= PAR_THRESHOLD {
            buf.par_chunks_mut(tri).enumerate().for_each(|(i, o)| eval_one(i, o));
        } else {
            for (i, o) in buf.chunks_mut(tri).enumerate() {
                eval_one(i, o);
            }
        }
        for e in 0..tri {
            for i in 0..n {
                col[i] = buf[i * tri + e];
            }
            acc[e] += pairwise_sum(&col);
        }
    }

    let mut mat = DMatrix::zeros(p, p);
    let mut idx = 0;
    for r in 0..p {
        for c in r..p {
            let v = acc[idx] / n as f64;
            mat[(r, c)] = v;
            mat[(c, r)] = v;
            idx += 1;
        }
    }
    FisherMatrix::new(FisherKind::Empirical, mat)
}

/// Limit Fisher information: trapezoid quadrature over a reference flow of
/// the measure-averaged Gram `E_{x∼ν_t}[(∇b)ᵀ c⁻¹ ∇b]`.
pub fn limit_fisher(
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    theta: &[f64],
    flow: &MeasureFlow,
) -> Result<FisherMatrix> {
    validate_theta(model, theta).map_err(|v| {
        Error::Domain(format!(
            "{}: invalid parameter: {}",
            model.name(),
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
        ))
    })?;
    let d = model.state_dim();
    let p = model.param_dim();
    if flow.measure_at(0).dim() != d {
        return Err(Error::Shape(format!(
            "limit fisher: flow dimension {} vs model d = {d}",
            flow.measure_at(0).dim()
        )));
    }
    let grid = flow.grid();
    let m = grid.n_steps();
    let dt = grid.dt();
    let tri = p * (p + 1) / 2;

    let gram_at = |j: usize| -> Vec<f64> {
        let nu = flow.measure_at(j);
        let t = grid.time(j);
        let nn = nu.n_atoms();
        let mut buf = vec![0.0; nn * tri];
        let eval_one = |i: usize, out: &mut [f64]| {
            let x = nu.atom(i);
            let mut grad = vec![0.0; d * p];
            model.drift_grad_into(theta, t, x, nu, &mut grad);
            let mut gq = vec![0.0; d];
            let mut wq = vec![0.0; d * p];
            for q in 0..p {
                for k in 0..d {
                    gq[k] = grad[k * p + q];
                }
                diff.apply_c_inv(&gq, &mut wq[q * d..(q + 1) * d]);
            }
            let mut idx = 0;
            for r in 0..p {
                for c in r..p {
                    let mut s = 0.0;
                    for k in 0..d {
                        s += grad[k * p + r] * wq[c * d + k];
                    }
                    out[idx] = s;
                    idx += 1;
                }
            }
        };
        if nn >= PAR_THRESHOLD {
            buf.par_chunks_mut(tri).enumerate().for_each(|(i, o)| eval_one(i, o));
        } else {
            for (i, o) in buf.chunks_mut(tri).enumerate() {
                eval_one(i, o);
            }
        }
        let mut col = vec![0.0; nn];
        (0..tri)
            .map(|e| {
                for i in 0..nn {
                    col[i] = buf[i * tri + e];
                }
                pairwise_sum(&col) / nn as f64
            })
            .collect()
    };

    let mut acc = vec![0.0; tri];
    for j in 0..=m {
        let w = if j == 0 || j == m { 0.5 } else { 1.0 };
        let g = gram_at(j);
        for e in 0..tri {
            acc[e] += w * g[e] * dt;
        }
    }

    let mut mat = DMatrix::zeros(p, p);
    let mut idx = 0;
    for r in 0..p {
        for c in r..p {
            mat[(r, c)] = acc[idx];
            mat[(c, r)] = acc[idx];
            idx += 1;
        }
    }
    FisherMatrix::new(FisherKind::Limit, mat)
}

/// Closed-form limit Fisher for the mean-field OU family with unit
/// diffusion: trapezoid quadrature of
///
/// ```text
/// ⎡ m₂(t)   m̄(t)   −V(t) ⎤
/// ⎢ m̄(t)    1       0    ⎥ dt
/// ⎣ −V(t)   0       V(t) ⎦
/// ```
pub fn ou_limit_fisher(mom: &OuMoments, grid: &TimeGrid) -> Result<FisherMatrix> {
    let m = grid.n_steps();
    let dt = grid.dt();
    let mut i_m2 = 0.0;
    let mut i_mean = 0.0;
    let mut i_var = 0.0;
    for j in 0..=m {
        let w = if j == 0 || j == m { 0.5 } else { 1.0 };
        let t = grid.time(j);
        i_m2 += w * mom.second_moment(t) * dt;
        i_mean += w * mom.mean(t) * dt;
        i_var += w * mom.variance(t) * dt;
    }
    let t_total = grid.t_horizon();
    let mat = DMatrix::from_row_slice(
        3,
        3,
        &[i_m2, i_mean, -i_var, i_mean, t_total, 0.0, -i_var, 0.0, i_var],
    );
    FisherMatrix::new(FisherKind::ClosedForm, mat)
}

/// Determinant identity for the OU limit Fisher:
/// `det I = (∫V dt) · (T·∫m̄² dt − (∫m̄ dt)²)` when the quadrature applies
/// the same rule to every integrand (m₂ = V + m̄² pointwise).
pub fn ou_limit_fisher_det_parts(mom: &OuMoments, grid: &TimeGrid) -> (f64, f64) {
    let m = grid.n_steps();
    let dt = grid.dt();
    let mut i_var = 0.0;
    let mut i_mean = 0.0;
    let mut i_mean_sq = 0.0;
    for j in 0..=m {
        let w = if j == 0 || j == m { 0.5 } else { 1.0 };
        let t = grid.time(j);
        let mu = mom.mean(t);
        i_var += w * mom.variance(t) * dt;
        i_mean += w * mu * dt;
        i_mean_sq += w * mu * mu * dt;
    }
    (i_var, grid.t_horizon() * i_mean_sq - i_mean * i_mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, ModelSpec};
    use crate::simulate::{simulate_particles, InitialLaw};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn ou_model() -> Arc<dyn DriftModel> {
        let spec = ModelSpec::new("mckean_ou", vec![-2.0, -1.0, 0.1], vec![-0.5, 2.0, 1.0]);
        build_model(&spec).unwrap()
    }

    fn linear_model() -> Arc<dyn DriftModel> {
        let mut spec = ModelSpec::new("gen_linear", vec![-3.0, -3.0], vec![3.0, 3.0]);
        spec.kernel_f = Some("identity".into());
        spec.kernel_g = Some("gaussian_bump".into());
        build_model(&spec).unwrap()
    }

    fn ou_paths(n: usize, m: usize, seed: u64) -> ParticlePaths {
        let model = ou_model();
        let diff = DiffusionSpec::identity(1);
        let grid = TimeGrid::uniform(1.0, m).unwrap();
        simulate_particles(
            model.as_ref(),
            &diff,
            &[-1.0, 1.0, 0.5],
            n,
            &grid,
            &InitialLaw::gaussian(0.0, 0.5),
            seed,
        )
        .unwrap()
    }

    /// Brute-force reference: literal triple loop, naive accumulation.
    fn brute_loglik(
        model: &dyn DriftModel,
        diff: &DiffusionSpec,
        theta: &[f64],
        paths: &ParticlePaths,
    ) -> f64 {
        let n = paths.n_particles();
        let d = paths.dim();
        let dt = paths.grid().dt();
        let mut total = 0.0;
        for j in 0..paths.grid().n_steps() {
            let nu = paths.measure_at(j);
            for i in 0..n {
                let x = paths.state(j, i);
                let xn = paths.state(j + 1, i);
                let mut b = vec![0.0; d];
                model.drift_into(theta, paths.grid().time(j), x, &nu, &mut b);
                let mut w = vec![0.0; d];
                diff.apply_c_inv(&b, &mut w);
                for k in 0..d {
                    total += w[k] * (xn[k] - x[k]) - 0.5 * b[k] * w[k] * dt;
                }
            }
        }
        total
    }

    #[test]
    fn zero_drift_likelihood_is_zero() {
        let model = linear_model();
        let diff = DiffusionSpec::identity(1);
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let paths = simulate_particles(
            model.as_ref(),
            &diff,
            &[0.5, 0.5],
            50,
            &grid,
            &InitialLaw::point(0.0),
            3,
        )
        .unwrap();
        let ll = log_likelihood_discrete(model.as_ref(), &diff, &[0.0, 0.0], &paths).unwrap();
        assert_eq!(ll.value(), 0.0);
        assert_eq!(ll.per_particle(), 0.0);
    }

    #[test]
    fn toy_two_particle_two_step_brute_force() {
        let model = ou_model();
        let diff = DiffusionSpec::scalar(1, 1.3).unwrap();
        let grid = TimeGrid::uniform(0.5, 2).unwrap();
        let paths = simulate_particles(
            model.as_ref(),
            &diff,
            &[-1.0, 0.5, 0.3],
            2,
            &grid,
            &InitialLaw::gaussian(0.2, 0.4),
            11,
        )
        .unwrap();
        let theta = [-0.8, 1.0, 0.6];
        let fast = log_likelihood_discrete(model.as_ref(), &diff, &theta, &paths).unwrap();
        let brute = brute_loglik(model.as_ref(), &diff, &theta, &paths);
        assert_relative_eq!(fast.value(), brute, epsilon = 1e-12, max_relative = 1e-12);
    }

    #[test]
    fn likelihood_matches_brute_force_all_families_moderate_size() {
        let diff = DiffusionSpec::identity(1);
        let grid = TimeGrid::uniform(1.0, 7).unwrap();
        let mu0 = InitialLaw::gaussian(0.1, 0.3);
        // OU family
        let model = ou_model();
        let paths =
            simulate_particles(model.as_ref(), &diff, &[-1.2, 0.3, 0.4], 17, &grid, &mu0, 5).unwrap();
        let theta = [-0.7, 0.2, 0.9];
        let fast = log_likelihood_discrete(model.as_ref(), &diff, &theta, &paths).unwrap();
        assert_relative_eq!(
            fast.value(),
            brute_loglik(model.as_ref(), &diff, &theta, &paths),
            max_relative = 1e-12
        );
        // Linear kernel family
        let model = linear_model();
        let paths =
            simulate_particles(model.as_ref(), &diff, &[-0.5, 0.8], 17, &grid, &mu0, 6).unwrap();
        let theta = [0.3, -0.4];
        let fast = log_likelihood_discrete(model.as_ref(), &diff, &theta, &paths).unwrap();
        assert_relative_eq!(
            fast.value(),
            brute_loglik(model.as_ref(), &diff, &theta, &paths),
            max_relative = 1e-12
        );
    }

    #[test]
    fn permutation_invariance() {
        let model = ou_model();
        let diff = DiffusionSpec::identity(1);
        let paths = ou_paths(9, 6, 17);
        let theta = [-1.0, 0.5, 0.7];
        let base = log_likelihood_discrete(model.as_ref(), &diff, &theta, &paths).unwrap();

        // Relabel particles by an odd permutation: rebuild the flat data.
        let n = paths.n_particles();
        let perm: Vec<usize> = (0..n).map(|i| (i * 4 + 3) % n).collect();
        {
            let mut seen = perm.clone();
            seen.sort_unstable();
            assert_eq!(seen, (0..n).collect::<Vec<_>>(), "perm is a bijection");
        }
        let m = paths.grid().n_steps();
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
            paths.model_name().to_string(),
            paths.theta().to_vec(),
        )
        .unwrap();
        let after = log_likelihood_discrete(model.as_ref(), &diff, &theta, &permuted).unwrap();
        assert_relative_eq!(base.value(), after.value(), max_relative = 1e-12);
    }

    #[test]
    fn score_matches_finite_differences() {
        let model = ou_model();
        let diff = DiffusionSpec::scalar(1, 0.9).unwrap();
        let paths = ou_paths(40, 25, 23);
        let theta = [-1.1, 0.6, 0.45];
        let score = score_discrete(model.as_ref(), &diff, &theta, &paths).unwrap();
        let h = 1e-6;
        for q in 0..3 {
            let mut tp = theta;
            let mut tm = theta;
            tp[q] += h;
            tm[q] -= h;
            let lp = log_likelihood_discrete(model.as_ref(), &diff, &tp, &paths).unwrap().value();
            let lm = log_likelihood_discrete(model.as_ref(), &diff, &tm, &paths).unwrap().value();
            let fd = (lp - lm) / (2.0 * h);
            let scale = 1.0 + score[q].abs().max(fd.abs());
            assert!(
                (score[q] - fd).abs() <= 2e-4 * scale,
                "coord {q}: analytic {} vs fd {fd}",
                score[q]
            );
        }
    }

    #[test]
    fn combined_pass_agrees_with_separate_calls() {
        let model = ou_model();
        let diff = DiffusionSpec::identity(1);
        let paths = ou_paths(30, 12, 29);
        let theta = [-0.9, 0.4, 0.8];
        let (ll, score) = loglik_and_score(model.as_ref(), &diff, &theta, &paths).unwrap();
        let ll2 = log_likelihood_discrete(model.as_ref(), &diff, &theta, &paths).unwrap();
        let score2 = score_discrete(model.as_ref(), &diff, &theta, &paths).unwrap();
        assert_eq!(ll.value(), ll2.value());
        assert_eq!(score, score2);
    }

    #[test]
    fn ratio_single_pass_matches_difference() {
        let model = ou_model();
        let diff = DiffusionSpec::identity(1);
        let paths = ou_paths(60, 30, 31);
        let t0 = [-1.0, 1.0, 0.5];
        let t1 = [-0.95, 1.1, 0.55];
        let r = log_likelihood_ratio(model.as_ref(), &diff, &t0, &t1, &paths).unwrap();
        let l0 = log_likelihood_discrete(model.as_ref(), &diff, &t0, &paths).unwrap().value();
        let l1 = log_likelihood_discrete(model.as_ref(), &diff, &t1, &paths).unwrap().value();
        assert_relative_eq!(r, l1 - l0, epsilon = 1e-9, max_relative = 1e-9);
    }

    #[test]
    fn empirical_fisher_constant_atom_gram() {
        // All particles pinned at 0 under the OU gradient (x, 1, m̄ − x):
        // only the constant coordinate survives, giving Gram = T·e₂e₂ᵀ.
        let model = ou_model();
        let diff = DiffusionSpec::identity(1);
        let grid = TimeGrid::uniform(2.0, 8).unwrap();
        let n = 5;
        let data = vec![0.0; (8 + 1) * n];
        let paths = ParticlePaths::from_parts(
            n,
            1,
            grid,
            data,
            0,
            "mckean_ou".to_string(),
            vec![-1.0, 0.0, 0.5],
        )
        .unwrap();
        let fisher = empirical_fisher(model.as_ref(), &diff, &[-1.0, 0.0, 0.5], &paths).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let expect = if (r, c) == (1, 1) { 2.0 } else { 0.0 };
                assert_relative_eq!(fisher.entry(r, c), expect, epsilon = 1e-14);
            }
        }
        assert!(fisher.is_degenerate());
    }

    #[test]
    fn limit_fisher_agrees_with_closed_form_ou() {
        let model = ou_model();
        let diff = DiffusionSpec::identity(1);
        let theta = [-1.0, 1.0, 0.5];
        let mu0 = InitialLaw::gaussian(0.0, 0.5);
        let grid = TimeGrid::uniform(1.0, 200).unwrap();
        let n_ref = 20_000;
        let flow = crate::simulate::reference_flow(
            model.as_ref(),
            &diff,
            &theta,
            n_ref,
            &grid,
            &mu0,
            101,
        )
        .unwrap();
        let emp = limit_fisher(model.as_ref(), &diff, &theta, &flow).unwrap();
        let mom = OuMoments::from_initial_law(&theta, &mu0).unwrap();
        let exact = ou_limit_fisher(&mom, &grid).unwrap();
        // Monte Carlo and time-discretization error: moment SEs scale like
        // √(Var·stuff/N_ref); a uniform 4·(SE + dt) envelope on each entry.
        for r in 0..3 {
            for c in 0..3 {
                let se = 4.0 * (1.0 / (n_ref as f64).sqrt() + grid.dt());
                assert!(
                    (emp.entry(r, c) - exact.entry(r, c)).abs() <= se,
                    "entry ({r},{c}): {} vs {}",
                    emp.entry(r, c),
                    exact.entry(r, c)
                );
            }
        }
        assert!(!exact.is_degenerate());
    }

    #[test]
    fn ou_fisher_determinant_identity() {
        let mom = OuMoments::new(&[-1.0, 1.0, 0.5], 0.0, 0.5).unwrap();
        let grid = TimeGrid::uniform(1.0, 500).unwrap();
        let fisher = ou_limit_fisher(&mom, &grid).unwrap();
        let (iv, gram_part) = ou_limit_fisher_det_parts(&mom, &grid);
        assert_relative_eq!(fisher.det(), iv * gram_part, max_relative = 1e-8);
    }

    #[test]
    fn stationary_mean_flow_has_singular_fisher() {
        // mean₀ = −θ₂/θ₁ freezes the mean at 1; columns 2 and (1,3) become
        // linearly dependent and the determinant identity gives exactly 0.
        let mom = OuMoments::new(&[-1.0, 1.0, 0.5], 1.0, 0.5).unwrap();
        let grid = TimeGrid::uniform(1.0, 300).unwrap();
        let fisher = ou_limit_fisher(&mom, &grid).unwrap();
        let (_, gram_part) = ou_limit_fisher_det_parts(&mom, &grid);
        assert!(gram_part.abs() < 1e-10, "gram part {gram_part}");
        assert!(fisher.is_degenerate(), "det {}", fisher.det());
        assert!(fisher.inv_sqrt_psd().is_err());
    }

    #[test]
    fn empirical_fisher_approaches_limit_fisher() {
        let model = ou_model();
        let diff = DiffusionSpec::identity(1);
        let theta = [-1.0, 1.0, 0.5];
        let mu0 = InitialLaw::gaussian(0.0, 0.5);
        let grid = TimeGrid::uniform(1.0, 100).unwrap();
        let paths = simulate_particles(model.as_ref(), &diff, &theta, 10_000, &grid, &mu0, 55).unwrap();
        let emp = empirical_fisher(model.as_ref(), &diff, &theta, &paths).unwrap();
        let mom = OuMoments::from_initial_law(&theta, &mu0).unwrap();
        let exact = ou_limit_fisher(&mom, &grid).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert!(
                    (emp.entry(r, c) - exact.entry(r, c)).abs() <= 0.05,
                    "entry ({r},{c}): {} vs {}",
                    emp.entry(r, c),
                    exact.entry(r, c)
                );
            }
        }
    }

    #[test]
    fn discretization_error_decays_with_m() {
        // Fix one Brownian-rich dataset at fine resolution m = 800, then
        // subsample to coarser grids; the likelihood at the same θ should
        // approach the fine-grid value roughly linearly in Δt.
        let model = ou_model();
        let diff = DiffusionSpec::identity(1);
        let theta = [-1.0, 1.0, 0.5];
        let mu0 = InitialLaw::gaussian(0.0, 0.5);
        let n = 400;
        let fine_m = 800;
        let grid = TimeGrid::uniform(1.0, fine_m).unwrap();
        let fine = simulate_particles(model.as_ref(), &diff, &theta, n, &grid, &mu0, 77).unwrap();

        let subsample = |factor: usize| -> ParticlePaths {
            let m = fine_m / factor;
            let g = TimeGrid::uniform(1.0, m).unwrap();
            let mut data = Vec::with_capacity((m + 1) * n);
            for j in 0..=m {
                data.extend_from_slice(fine.slice_at(j * factor));
            }
            ParticlePaths::from_parts(n, 1, g, data, 77, "mckean_ou".into(), theta.to_vec()).unwrap()
        };

        let reference = log_likelihood_discrete(model.as_ref(), &diff, &theta, &fine)
            .unwrap()
            .per_particle();
        let mut errs = Vec::new();
        let mut ms = Vec::new();
        for factor in [8usize, 4, 2] {
            let coarse = subsample(factor);
            let ll = log_likelihood_discrete(model.as_ref(), &diff, &theta, &coarse)
                .unwrap()
                .per_particle();
            errs.push((ll - reference).abs().max(1e-12));
            ms.push((fine_m / factor) as f64);
        }
        let logm: Vec<f64> = ms.iter().map(|v| v.ln()).collect();
        let loge: Vec<f64> = errs.iter().map(|v| v.ln()).collect();
        let (slope, _) = crate::stats::linear_fit(&logm, &loge).unwrap();
        assert!(
            (-1.6..=-0.25).contains(&slope),
            "discretization decay slope {slope} (errors {errs:?})"
        );
    }

    #[test]
    fn fisher_matrix_validation() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 1.0]);
        assert!(FisherMatrix::new(FisherKind::Empirical, bad).is_err());
        let negative = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(FisherMatrix::new(FisherKind::Empirical, negative).is_err());
        let ok = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let f = FisherMatrix::new(FisherKind::Empirical, ok).unwrap();
        assert!(!f.is_degenerate());
        let root = f.sqrt_psd().unwrap();
        let back = &root * &root;
        assert_relative_eq!(back[(0, 0)], 2.0, max_relative = 1e-12);
        assert_relative_eq!(back[(0, 1)], 0.5, max_relative = 1e-12);
        let inv_root = f.inv_sqrt_psd().unwrap();
        let ident = &inv_root * f.matrix() * &inv_root;
        assert_relative_eq!(ident[(0, 0)], 1.0, max_relative = 1e-10);
        assert_relative_eq!(ident[(1, 1)], 1.0, max_relative = 1e-10);
        assert!(ident[(0, 1)].abs() < 1e-10);
    }
}
