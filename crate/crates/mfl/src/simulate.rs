//! Euler–Maruyama simulation of the interacting particle system.
//!
//! The N-particle system
//!
//! ```text
//! X^i_{t_{j+1}} = X^i_{t_j} + b(θ; t_j, X^i_{t_j}, μ^(N)_{t_j}) Δt + σ ΔB^i_j
//! ```
//!
//! is advanced on a uniform grid with the empirical measure frozen at the
//! left endpoint of each step. Gaussian increments come from a dedicated
//! stream per (seed, particle, step) — see `rng` — so the simulation is
//! bit-reproducible under any parallel schedule, and synchronous
//! couplings (same increments, different parameters or different measure
//! arguments) are exact by construction.
//!
//! The module also carries the closed-form moments of the mean-field
//! Ornstein–Uhlenbeck limit law, which serve as oracles throughout the
//! test and acceptance suites: with `a = θ₁ − θ₃`,
//!
//! ```text
//! mean(t) = −θ₂/θ₁ + (mean₀ + θ₂/θ₁) e^{θ₁ t}
//! Var(t)  = e^{2at} Var₀ + (e^{2at} − 1) / (2a)
//! m₂(t)   = Var(t) + mean(t)²
//! ```
//!
//! (`dVar/dt = 2a·Var + 1` with the cloud-mean attraction −θ₃ folded into
//! the deviation dynamics; the variance saturates at −1/(2a) when a < 0.)

use rayon::prelude::*;

use crate::diffusion::DiffusionSpec;
use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::models::{validate_theta, DriftModel};
use crate::rng::StreamRng;

/// Uniform time grid on [0, T] with m steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    t_horizon: f64,
    m: usize,
}

impl TimeGrid {
    pub fn uniform(t_horizon: f64, m: usize) -> Result<Self> {
        if !(t_horizon.is_finite() && t_horizon > 0.0) {
            return Err(Error::Domain(format!("time grid: horizon must be positive, got {t_horizon}")));
        }
        if m == 0 {
            return Err(Error::Domain("time grid: need at least one step".into()));
        }
        Ok(TimeGrid { t_horizon, m })
    }

    pub fn t_horizon(&self) -> f64 {
        self.t_horizon
    }

    pub fn n_steps(&self) -> usize {
        self.m
    }

    pub fn dt(&self) -> f64 {
        self.t_horizon / self.m as f64
    }

    pub fn time(&self, j: usize) -> f64 {
        self.t_horizon * j as f64 / self.m as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.m).map(|j| self.time(j)).collect()
    }
}

/// Initial law μ₀ (product across coordinates for d > 1).
#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    Point { value: Vec<f64> },
    Gaussian { mean: Vec<f64>, var: Vec<f64> },
    Uniform { lower: Vec<f64>, upper: Vec<f64> },
}

impl InitialLaw {
    pub fn point(value: f64) -> Self {
        InitialLaw::Point { value: vec![value] }
    }

    pub fn gaussian(mean: f64, var: f64) -> Self {
        InitialLaw::Gaussian { mean: vec![mean], var: vec![var] }
    }

    pub fn uniform(lower: f64, upper: f64) -> Self {
        InitialLaw::Uniform { lower: vec![lower], upper: vec![upper] }
    }

    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Point { value } => value.len(),
            InitialLaw::Gaussian { mean, .. } => mean.len(),
            InitialLaw::Uniform { lower, .. } => lower.len(),
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.dim() != d {
            return Err(Error::Shape(format!(
                "initial law dimension {} does not match state dimension {d}",
                self.dim()
            )));
        }
        let all_finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            InitialLaw::Point { value } => {
                if !all_finite(value) {
                    return Err(Error::Domain("initial law: non-finite point".into()));
                }
            }
            InitialLaw::Gaussian { mean, var } => {
                if mean.len() != var.len() || !all_finite(mean) || !all_finite(var) {
                    return Err(Error::Domain("initial law: invalid Gaussian spec".into()));
                }
                if var.iter().any(|&v| v < 0.0) {
                    return Err(Error::Domain("initial law: negative Gaussian variance".into()));
                }
            }
            InitialLaw::Uniform { lower, upper } => {
                if lower.len() != upper.len() || !all_finite(lower) || !all_finite(upper) {
                    return Err(Error::Domain("initial law: invalid uniform spec".into()));
                }
                if lower.iter().zip(upper).any(|(&a, &b)| a > b) {
                    return Err(Error::Domain("initial law: uniform lower > upper".into()));
                }
            }
        }
        Ok(())
    }

    /// Mean of coordinate k.
    pub fn mean(&self, k: usize) -> f64 {
        match self {
            InitialLaw::Point { value } => value[k],
            InitialLaw::Gaussian { mean, .. } => mean[k],
            InitialLaw::Uniform { lower, upper } => 0.5 * (lower[k] + upper[k]),
        }
    }

    /// Variance of coordinate k.
    pub fn var(&self, k: usize) -> f64 {
        match self {
            InitialLaw::Point { .. } => 0.0,
            InitialLaw::Gaussian { var, .. } => var[k],
            InitialLaw::Uniform { lower, upper } => {
                let w = upper[k] - lower[k];
                w * w / 12.0
            }
        }
    }

    pub fn sample_into(&self, rng: &mut StreamRng, out: &mut [f64]) {
        match self {
            InitialLaw::Point { value } => out.copy_from_slice(value),
            InitialLaw::Gaussian { mean, var } => {
                rng.fill_normals(out);
                for (k, v) in out.iter_mut().enumerate() {
                    *v = mean[k] + var[k].sqrt() * *v;
                }
            }
            InitialLaw::Uniform { lower, upper } => {
                for (k, v) in out.iter_mut().enumerate() {
                    *v = lower[k] + (upper[k] - lower[k]) * rng.next_uniform();
                }
            }
        }
    }
}

/// Simulated trajectories of all N particles on a grid.
///
/// Storage is step-major (`((j*N)+i)*d + k`), so the slice of all
/// positions at one time is contiguous and becomes an `EmpiricalMeasure`
/// without a gather.
#[derive(Debug, Clone)]
pub struct ParticlePaths {
    n: usize,
    d: usize,
    grid: TimeGrid,
    data: Vec<f64>,
    seed: u64,
    model_name: String,
    theta: Vec<f64>,
}

impl ParticlePaths {
    pub fn n_particles(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Position of particle i at grid index j.
    pub fn state(&self, j: usize, i: usize) -> &[f64] {
        let base = (j * self.n + i) * self.d;
        &self.data[base..base + self.d]
    }

    /// All positions at grid index j, flat (n × d).
    pub fn slice_at(&self, j: usize) -> &[f64] {
        let base = j * self.n * self.d;
        &self.data[base..base + self.n * self.d]
    }

    pub fn measure_at(&self, j: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::from_atoms(self.slice_at(j).to_vec(), self.d)
            .expect("paths hold finite states by construction")
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Assemble paths from raw parts (used by the CSV reader).
    pub fn from_parts(
        n: usize,
        d: usize,
        grid: TimeGrid,
        data: Vec<f64>,
        seed: u64,
        model_name: String,
        theta: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != (grid.n_steps() + 1) * n * d {
            return Err(Error::Shape(format!(
                "particle paths: buffer length {} does not match (m+1)*n*d = {}",
                data.len(),
                (grid.n_steps() + 1) * n * d
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("particle paths: non-finite entry".into()));
        }
        Ok(ParticlePaths { n, d, grid, data, seed, model_name, theta })
    }
}

/// Measure-valued flow: one empirical measure per grid time.
#[derive(Debug, Clone)]
pub struct MeasureFlow {
    grid: TimeGrid,
    measures: Vec<EmpiricalMeasure>,
}

impl MeasureFlow {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn measure_at(&self, j: usize) -> &EmpiricalMeasure {
        &self.measures[j]
    }

    pub fn n_atoms(&self) -> usize {
        self.measures[0].n_atoms()
    }

    pub fn from_paths(paths: &ParticlePaths) -> Self {
        let measures = (0..=paths.grid().n_steps()).map(|j| paths.measure_at(j)).collect();
        MeasureFlow { grid: paths.grid().clone(), measures }
    }
}

fn validated(model: &dyn DriftModel, theta: &[f64]) -> Result<()> {
    validate_theta(model, theta).map_err(|violations| {
        Error::Domain(format!(
            "{}: invalid parameter: {}",
            model.name(),
            violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
        ))
    })
}

/// One Euler–Maruyama update. `z` enters as raw standard normals and is
/// scaled in place; the arithmetic order is fixed so coupled runs agree
/// bit-for-bit with plain runs.
#[inline]
fn em_update(
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    theta: &[f64],
    t: f64,
    dt: f64,
    sqrt_dt: f64,
    x: &[f64],
    nu: &EmpiricalMeasure,
    z: &mut [f64],
    drift_buf: &mut [f64],
    out: &mut [f64],
) {
    model.drift_into(theta, t, x, nu, drift_buf);
    for v in z.iter_mut() {
        *v *= sqrt_dt;
    }
    diff.apply_sigma(z);
    for k in 0..x.len() {
        out[k] = x[k] + drift_buf[k] * dt + z[k];
    }
}

fn first_non_finite(slice: &[f64], d: usize) -> Option<usize> {
    slice.iter().position(|v| !v.is_finite()).map(|pos| pos / d)
}

/// Simulate the interacting N-particle system.
pub fn simulate_particles(
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    theta: &[f64],
    n: usize,
    grid: &TimeGrid,
    mu0: &InitialLaw,
    seed: u64,
) -> Result<ParticlePaths> {
    validated(model, theta)?;
    let d = model.state_dim();
    if n == 0 {
        return Err(Error::Domain("simulate: need at least one particle".into()));
    }
    if diff.dim() != d {
        return Err(Error::Shape(format!("simulate: diffusion dimension {} vs model d = {d}", diff.dim())));
    }
    mu0.validate(d)?;

    let m = grid.n_steps();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let mut data = vec![0.0; (m + 1) * n * d];

    // Initial positions: stream (seed, [i, 0]).
    for i in 0..n {
        let mut rng = StreamRng::new(seed, &[i as u64, 0]);
        mu0.sample_into(&mut rng, &mut data[i * d..(i + 1) * d]);
    }
    if let Some(i) = first_non_finite(&data[..n * d], d) {
        return Err(Error::BlowUp { step: 0, particle: i });
    }

    let parallel = n >= 512;
    for j in 1..=m {
        let (prev_all, rest) = data.split_at_mut(j * n * d);
        let prev = &prev_all[(j - 1) * n * d..];
        let next = &mut rest[..n * d];
        let nu = EmpiricalMeasure::from_atoms(prev.to_vec(), d)
            .expect("previous slice finite: checked each step");
        let t = grid.time(j - 1);

        let step_one = |i: usize, out: &mut [f64]| {
            let mut z = vec![0.0; d];
            let mut bbuf = vec![0.0; d];
            let mut rng = StreamRng::new(seed, &[i as u64, j as u64]);
            rng.fill_normals(&mut z);
            em_update(
                model,
                diff,
                theta,
                t,
                dt,
                sqrt_dt,
                &prev[i * d..(i + 1) * d],
                &nu,
                &mut z,
                &mut bbuf,
                out,
            );
        };

        if parallel {
            next.par_chunks_mut(d).enumerate().for_each(|(i, out)| step_one(i, out));
        } else {
            for (i, out) in next.chunks_mut(d).enumerate() {
                step_one(i, out);
            }
        }
        if let Some(i) = first_non_finite(next, d) {
            return Err(Error::BlowUp { step: j, particle: i });
        }
    }

    Ok(ParticlePaths {
        n,
        d,
        grid: grid.clone(),
        data,
        seed,
        model_name: model.name().to_string(),
        theta: theta.to_vec(),
    })
}

/// Synchronous coupling of two parameter values: identical initial
/// positions and identical Brownian increments. The first output is
/// bit-identical to `simulate_particles(θ)`.
pub fn coupled_simulate(
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    theta: &[f64],
    theta_prime: &[f64],
    n: usize,
    grid: &TimeGrid,
    mu0: &InitialLaw,
    seed: u64,
) -> Result<(ParticlePaths, ParticlePaths)> {
    validated(model, theta)?;
    validated(model, theta_prime)?;
    let d = model.state_dim();
    if n == 0 {
        return Err(Error::Domain("simulate: need at least one particle".into()));
    }
    if diff.dim() != d {
        return Err(Error::Shape(format!("simulate: diffusion dimension {} vs model d = {d}", diff.dim())));
    }
    mu0.validate(d)?;

    let m = grid.n_steps();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let mut data_a = vec![0.0; (m + 1) * n * d];
    let mut data_b = vec![0.0; (m + 1) * n * d];

    for i in 0..n {
        let mut rng = StreamRng::new(seed, &[i as u64, 0]);
        mu0.sample_into(&mut rng, &mut data_a[i * d..(i + 1) * d]);
    }
    data_b[..n * d].copy_from_slice(&data_a[..n * d]);
    if let Some(i) = first_non_finite(&data_a[..n * d], d) {
        return Err(Error::BlowUp { step: 0, particle: i });
    }

    for j in 1..=m {
        let base_prev = (j - 1) * n * d;
        let base_next = j * n * d;
        let nu_a = EmpiricalMeasure::from_atoms(data_a[base_prev..base_prev + n * d].to_vec(), d)
            .expect("finite by per-step check");
        let nu_b = EmpiricalMeasure::from_atoms(data_b[base_prev..base_prev + n * d].to_vec(), d)
            .expect("finite by per-step check");
        let t = grid.time(j - 1);
        let mut z = vec![0.0; d];
        let mut z2 = vec![0.0; d];
        let mut bbuf = vec![0.0; d];
        let mut out = vec![0.0; d];
        for i in 0..n {
            let mut rng = StreamRng::new(seed, &[i as u64, j as u64]);
            rng.fill_normals(&mut z);
            z2.copy_from_slice(&z);
            let xa = &data_a[base_prev + i * d..base_prev + (i + 1) * d];
            em_update(model, diff, theta, t, dt, sqrt_dt, xa, &nu_a, &mut z, &mut bbuf, &mut out);
            data_a[base_next + i * d..base_next + (i + 1) * d].copy_from_slice(&out);
            let xb = &data_b[base_prev + i * d..base_prev + (i + 1) * d];
            em_update(model, diff, theta_prime, t, dt, sqrt_dt, xb, &nu_b, &mut z2, &mut bbuf, &mut out);
            data_b[base_next + i * d..base_next + (i + 1) * d].copy_from_slice(&out);
        }
        if let Some(i) = first_non_finite(&data_a[base_next..base_next + n * d], d) {
            return Err(Error::BlowUp { step: j, particle: i });
        }
        if let Some(i) = first_non_finite(&data_b[base_next..base_next + n * d], d) {
            return Err(Error::BlowUp { step: j, particle: i });
        }
    }

    let mk = |data: Vec<f64>, th: &[f64]| ParticlePaths {
        n,
        d,
        grid: grid.clone(),
        data,
        seed,
        model_name: model.name().to_string(),
        theta: th.to_vec(),
    };
    Ok((mk(data_a, theta), mk(data_b, theta_prime)))
}

pub const REFERENCE_FLOW_FLOOR: usize = 1000;

/// Approximate the limit law flow by a large-N reference cloud.
pub fn reference_flow(
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    theta: &[f64],
    n_ref: usize,
    grid: &TimeGrid,
    mu0: &InitialLaw,
    seed: u64,
) -> Result<MeasureFlow> {
    reference_flow_with_floor(model, diff, theta, n_ref, grid, mu0, seed, REFERENCE_FLOW_FLOOR)
}

/// As [`reference_flow`] with an explicit cloud-size floor (tests use a
/// floor of 1 to exercise degenerate clouds).
#[allow(clippy::too_many_arguments)]
pub fn reference_flow_with_floor(
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    theta: &[f64],
    n_ref: usize,
    grid: &TimeGrid,
    mu0: &InitialLaw,
    seed: u64,
    floor: usize,
) -> Result<MeasureFlow> {
    if n_ref < floor {
        return Err(Error::Domain(format!(
            "reference flow: N_ref = {n_ref} below the floor {floor}"
        )));
    }
    let paths = simulate_particles(model, diff, theta, n_ref, grid, mu0, seed)?;
    Ok(MeasureFlow::from_paths(&paths))
}

/// Simulate N particles under the *product/limit* dynamics: each particle
/// is driven by the reference flow (not by the cloud's own empirical
/// measure), so the particles are i.i.d. copies of the discretized limit
/// diffusion. Same stream discipline as [`simulate_particles`].
pub fn product_simulate(
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    theta: &[f64],
    n: usize,
    flow: &MeasureFlow,
    mu0: &InitialLaw,
    seed: u64,
) -> Result<ParticlePaths> {
    validated(model, theta)?;
    let d = model.state_dim();
    if n == 0 {
        return Err(Error::Domain("simulate: need at least one particle".into()));
    }
    if diff.dim() != d {
        return Err(Error::Shape(format!("simulate: diffusion dimension {} vs model d = {d}", diff.dim())));
    }
    mu0.validate(d)?;
    let grid = flow.grid().clone();
    let m = grid.n_steps();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let mut data = vec![0.0; (m + 1) * n * d];

    for i in 0..n {
        let mut rng = StreamRng::new(seed, &[i as u64, 0]);
        mu0.sample_into(&mut rng, &mut data[i * d..(i + 1) * d]);
    }
    if let Some(i) = first_non_finite(&data[..n * d], d) {
        return Err(Error::BlowUp { step: 0, particle: i });
    }

    let parallel = n >= 512;
    for j in 1..=m {
        let (prev_all, rest) = data.split_at_mut(j * n * d);
        let prev = &prev_all[(j - 1) * n * d..];
        let next = &mut rest[..n * d];
        let nu = flow.measure_at(j - 1);
        let t = grid.time(j - 1);

        let step_one = |i: usize, out: &mut [f64]| {
            let mut z = vec![0.0; d];
            let mut bbuf = vec![0.0; d];
            let mut rng = StreamRng::new(seed, &[i as u64, j as u64]);
            rng.fill_normals(&mut z);
            em_update(
                model,
                diff,
                theta,
                t,
                dt,
                sqrt_dt,
                &prev[i * d..(i + 1) * d],
                nu,
                &mut z,
                &mut bbuf,
                out,
            );
        };
        if parallel {
            next.par_chunks_mut(d).enumerate().for_each(|(i, out)| step_one(i, out));
        } else {
            for (i, out) in next.chunks_mut(d).enumerate() {
                step_one(i, out);
            }
        }
        if let Some(i) = first_non_finite(next, d) {
            return Err(Error::BlowUp { step: j, particle: i });
        }
    }

    Ok(ParticlePaths {
        n,
        d,
        grid,
        data,
        seed,
        model_name: model.name().to_string(),
        theta: theta.to_vec(),
    })
}

/// Closed-form moments of the mean-field OU limit law.
#[derive(Debug, Clone, Copy)]
pub struct OuMoments {
    theta: [f64; 3],
    mean0: f64,
    var0: f64,
}

impl OuMoments {
    pub fn new(theta: &[f64], mean0: f64, var0: f64) -> Result<Self> {
        if theta.len() != 3 {
            return Err(Error::Shape(format!("OU moments: need p = 3, got {}", theta.len())));
        }
        if theta[0] == 0.0 {
            return Err(Error::Domain("OU moments: theta_1 = 0 (mean dynamics not invertible)".into()));
        }
        if theta[0] == theta[2] {
            return Err(Error::Domain("OU moments: theta_1 = theta_3 (variance dynamics degenerate)".into()));
        }
        if !(var0.is_finite() && var0 >= 0.0) || !mean0.is_finite() {
            return Err(Error::Domain("OU moments: invalid initial moments".into()));
        }
        Ok(OuMoments { theta: [theta[0], theta[1], theta[2]], mean0, var0 })
    }

    pub fn from_initial_law(theta: &[f64], mu0: &InitialLaw) -> Result<Self> {
        if mu0.dim() != 1 {
            return Err(Error::Shape("OU moments: initial law must be scalar".into()));
        }
        Self::new(theta, mu0.mean(0), mu0.var(0))
    }

    /// mean(t) = −θ₂/θ₁ + (mean₀ + θ₂/θ₁) e^{θ₁ t}
    pub fn mean(&self, t: f64) -> f64 {
        let ratio = self.theta[1] / self.theta[0];
        -ratio + (self.mean0 + ratio) * (self.theta[0] * t).exp()
    }

    /// Var(t) = e^{2(θ₁−θ₃)t} Var₀ + (e^{2(θ₁−θ₃)t} − 1)/(2(θ₁−θ₃))
    pub fn variance(&self, t: f64) -> f64 {
        let k = 2.0 * (self.theta[0] - self.theta[2]);
        let e = (k * t).exp();
        e * self.var0 + (e - 1.0) / k
    }

    /// m₂(t) = Var(t) + mean(t)²
    pub fn second_moment(&self, t: f64) -> f64 {
        let mu = self.mean(t);
        self.variance(t) + mu * mu
    }
}

/// Free-function forms of the OU oracles.
pub fn ou_mean(mom: &OuMoments, t: f64) -> f64 {
    mom.mean(t)
}

pub fn ou_second_moment(mom: &OuMoments, t: f64) -> f64 {
    mom.second_moment(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, ModelSpec};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn ou_model() -> Arc<dyn DriftModel> {
        let spec = ModelSpec::new("mckean_ou", vec![-2.0, -6.0, 0.3], vec![-0.5, 6.0, 1.0]);
        build_model(&spec).unwrap()
    }

    fn brownian_model() -> Arc<dyn DriftModel> {
        let mut spec = ModelSpec::new("gen_linear", vec![-1.0, -1.0], vec![1.0, 1.0]);
        spec.kernel_f = Some("identity".into());
        spec.kernel_g = Some("identity".into());
        build_model(&spec).unwrap()
    }

    #[test]
    fn zero_drift_paths_are_brownian() {
        let model = brownian_model();
        let diff = DiffusionSpec::identity(1);
        let grid = TimeGrid::uniform(1.0, 16).unwrap();
        let n = 100_000;
        let paths = simulate_particles(
            model.as_ref(),
            &diff,
            &[0.0, 0.0],
            n,
            &grid,
            &InitialLaw::point(0.0),
            99,
        )
        .unwrap();
        let terminal = paths.slice_at(grid.n_steps());
        let mean = crate::stats::mean(terminal);
        let bound = 3.0 * (grid.t_horizon() / n as f64).sqrt();
        assert!(mean.abs() <= bound, "terminal mean {mean} vs bound {bound}");
    }

    #[test]
    fn determinism_same_seed_same_bytes() {
        let model = ou_model();
        let diff = DiffusionSpec::identity(1);
        let grid = TimeGrid::uniform(1.0, 32).unwrap();
        let mu0 = InitialLaw::gaussian(1.0, 0.5);
        let theta = [-1.0, 1.0, 0.5];
        let a = simulate_particles(model.as_ref(), &diff, &theta, 600, &grid, &mu0, 7).unwrap();
        let b = simulate_particles(model.as_ref(), &diff, &theta, 600, &grid, &mu0, 7).unwrap();
        assert_eq!(a.data(), b.data());
        let c = simulate_particles(model.as_ref(), &diff, &theta, 600, &grid, &mu0, 8).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn ou_mean_tracks_closed_form() {
        let model = ou_model();
        let diff = DiffusionSpec::identity(1);
        let grid = TimeGrid::uniform(1.0, 200).unwrap();
        let theta = [-1.0, 1.0, 0.5];
        let n = 20_000;
        let paths =
            simulate_particles(model.as_ref(), &diff, &theta, n, &grid, &InitialLaw::point(1.0), 3).unwrap();
        let mom = OuMoments::new(&theta, 1.0, 0.0).unwrap();
        for j in [50, 100, 200] {
            let t = grid.time(j);
            let emp = crate::stats::mean(paths.slice_at(j));
            let se = (mom.variance(t).max(1e-12) / n as f64).sqrt();
            assert!(
                (emp - mom.mean(t)).abs() <= 4.0 * se + 2.0 / grid.n_steps() as f64,
                "t = {t}: {emp} vs {} (se {se})",
                mom.mean(t)
            );
        }
    }

    #[test]
    fn coupled_first_output_matches_plain_and_equal_thetas_coincide() {
        let model = ou_model();
        let diff = DiffusionSpec::identity(1);
        let grid = TimeGrid::uniform(0.5, 20).unwrap();
        let mu0 = InitialLaw::gaussian(0.0, 1.0);
        let theta = [-1.0, 0.5, 0.5];
        let plain = simulate_particles(model.as_ref(), &diff, &theta, 128, &grid, &mu0, 21).unwrap();
        let (a, b) = coupled_simulate(model.as_ref(), &diff, &theta, &theta, 128, &grid, &mu0, 21).unwrap();
        assert_eq!(plain.data(), a.data());
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn coupled_distance_scales_with_parameter_gap() {
        let model = ou_model();
        let diff = DiffusionSpec::identity(1);
        let grid = TimeGrid::uniform(1.0, 64).unwrap();
        let mu0 = InitialLaw::gaussian(0.0, 0.5);
        let theta = [-1.0, 1.0, 0.5];
        let mut dists = Vec::new();
        for h in [0.1, 0.05, 0.025] {
            let theta_p = [-1.0 - h, 1.0 + h, 0.5 + h];
            let (a, b) =
                coupled_simulate(model.as_ref(), &diff, &theta, &theta_p, 256, &grid, &mu0, 4).unwrap();
            let mut total = 0.0;
            for i in 0..256 {
                let mut worst: f64 = 0.0;
                for j in 0..=grid.n_steps() {
                    worst = worst.max((a.state(j, i)[0] - b.state(j, i)[0]).abs());
                }
                total += worst;
            }
            dists.push(total / 256.0);
        }
        // Pathwise distance should scale ~ linearly in |θ′−θ|: the
        // per-unit ratio stays within a factor 2 across the levels.
        let per_unit: Vec<f64> = dists.iter().zip([0.1, 0.05, 0.025]).map(|(&d, h)| d / h).collect();
        for w in per_unit.windows(2) {
            assert!(w[1] / w[0] < 2.0 && w[0] / w[1] < 2.0, "per-unit distances {per_unit:?}");
        }
    }

    #[test]
    fn reference_flow_tracks_ou_moments() {
        let model = ou_model();
        let diff = DiffusionSpec::identity(1);
        let grid = TimeGrid::uniform(1.0, 100).unwrap();
        let theta = [-1.0, 1.0, 0.5];
        let mu0 = InitialLaw::gaussian(0.0, 0.5);
        let n_ref = 20_000;
        let flow = reference_flow(model.as_ref(), &diff, &theta, n_ref, &grid, &mu0, 12).unwrap();
        let mom = OuMoments::from_initial_law(&theta, &mu0).unwrap();
        for j in [25, 50, 100] {
            let t = grid.time(j);
            let nu = flow.measure_at(j);
            let var = mom.variance(t);
            let se_mean = (var / n_ref as f64).sqrt();
            assert!(
                (nu.mean_first() - mom.mean(t)).abs() <= 4.0 * se_mean + 2.0 / grid.n_steps() as f64,
                "mean at t = {t}"
            );
            let m2 = mom.second_moment(t);
            let mu = mom.mean(t);
            let se_m2 = ((2.0 * var * var + 4.0 * var * mu * mu) / n_ref as f64).sqrt();
            assert!(
                (nu.second_moment_first() - m2).abs() <= 4.0 * se_m2 + 4.0 / grid.n_steps() as f64,
                "second moment at t = {t}: {} vs {m2}",
                nu.second_moment_first()
            );
        }
    }

    #[test]
    fn degenerate_reference_cloud_is_a_single_brownian_path() {
        let model = brownian_model();
        let diff = DiffusionSpec::identity(1);
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let flow = reference_flow_with_floor(
            model.as_ref(),
            &diff,
            &[0.0, 0.0],
            1,
            &grid,
            &InitialLaw::point(0.0),
            5,
            1,
        )
        .unwrap();
        assert_eq!(flow.n_atoms(), 1);
        assert_eq!(flow.measure_at(0).atom(0)[0], 0.0);
        // Increment variance sanity: nonzero path.
        assert!(flow.measure_at(grid.n_steps()).atom(0)[0] != 0.0);
        // Default floor rejects tiny clouds.
        assert!(reference_flow(
            model.as_ref(),
            &diff,
            &[0.0, 0.0],
            10,
            &grid,
            &InitialLaw::point(0.0),
            5
        )
        .is_err());
    }

    #[test]
    fn blow_up_reports_step_and_particle() {
        let model = brownian_model();
        let diff = DiffusionSpec::identity(1);
        // x doubles each unit step under θ = (1, 0); overflow needs
        // ≈ 1024 doublings from 1.0.
        let grid = TimeGrid::uniform(1100.0, 1100).unwrap();
        let err = simulate_particles(
            model.as_ref(),
            &diff,
            &[1.0, 0.0],
            4,
            &grid,
            &InitialLaw::point(1.0),
            2,
        )
        .unwrap_err();
        match err {
            Error::BlowUp { step, particle } => {
                assert!(step > 900 && step <= 1100, "step {step}");
                assert!(particle < 4);
            }
            other => panic!("expected blow-up, got {other}"),
        }
    }

    #[test]
    fn ou_moment_formulas() {
        // t = 0 reduces to the initial moments.
        let mom = OuMoments::new(&[-1.0, 1.0, 0.5], 0.7, 0.3).unwrap();
        assert_relative_eq!(mom.mean(0.0), 0.7);
        assert_relative_eq!(mom.second_moment(0.0), 0.3 + 0.49);
        // θ = (1, 0, ·), mean₀ = 1: mean(ln 2) = 2.
        let mom = OuMoments::new(&[1.0, 0.0, 3.0], 1.0, 0.0).unwrap();
        assert_relative_eq!(mom.mean(2.0f64.ln()), 2.0, max_relative = 1e-12);
        // θ = (−1, 1, ·), mean₀ = 1: the exponential coefficient vanishes.
        let mom = OuMoments::new(&[-1.0, 1.0, 0.5], 1.0, 0.0).unwrap();
        for t in [0.1, 0.5, 2.0] {
            assert_relative_eq!(mom.mean(t), 1.0, max_relative = 1e-12);
        }
        // Var₀ = 1/(2(θ₃−θ₁)) is the fixed point of the variance flow.
        let (t1, t3) = (-1.0, 0.5);
        let var0 = 1.0 / (2.0 * (t3 - t1));
        let mom = OuMoments::new(&[t1, 0.0, t3], 0.0, var0).unwrap();
        for t in [0.25, 1.0, 4.0] {
            assert_relative_eq!(mom.second_moment(t), var0, max_relative = 1e-12);
        }
        // θ = (1, 0, 2), Var₀ = 0, mean₀ = 0 at t = 1: individually
        // unstable but interaction-dominated; variance saturates toward
        // 1/2 from below.
        let mom = OuMoments::new(&[1.0, 0.0, 2.0], 0.0, 0.0).unwrap();
        assert_relative_eq!(mom.second_moment(1.0), (1.0 - (-2.0f64).exp()) / 2.0, max_relative = 1e-12);
        // Constraint violations are domain errors.
        assert!(OuMoments::new(&[0.0, 1.0, 0.5], 0.0, 1.0).is_err());
        assert!(OuMoments::new(&[1.0, 1.0, 1.0], 0.0, 1.0).is_err());
    }

    #[test]
    fn variance_matches_simulation_for_unstable_individual_rate() {
        // Direct Monte Carlo check of the variance sign convention: with
        // θ₁ = 1, θ₃ = 2 the interaction stabilizes the cloud and the
        // spread stays near (1 − e^{−2t})/2, nowhere near the diverging
        // branch e^{2t}.
        let spec = ModelSpec::new("mckean_ou", vec![0.9, -1.0, 1.8], vec![1.1, 1.0, 2.5]);
        let model = build_model(&spec).unwrap();
        let diff = DiffusionSpec::identity(1);
        let grid = TimeGrid::uniform(1.0, 400).unwrap();
        let theta = [1.0, 0.0, 2.0];
        let n = 20_000;
        let paths = simulate_particles(
            model.as_ref(),
            &diff,
            &theta,
            n,
            &grid,
            &InitialLaw::point(0.0),
            31,
        )
        .unwrap();
        let mom = OuMoments::new(&theta, 0.0, 0.0).unwrap();
        let terminal = paths.measure_at(grid.n_steps());
        let predicted = mom.second_moment(1.0);
        assert!(
            (terminal.second_moment_first() - predicted).abs() <= 0.02,
            "simulated m2 {} vs closed form {predicted}",
            terminal.second_moment_first()
        );
    }

    #[test]
    fn product_simulation_is_iid_against_flow() {
        let model = ou_model();
        let diff = DiffusionSpec::identity(1);
        let grid = TimeGrid::uniform(1.0, 50).unwrap();
        let theta = [-1.0, 1.0, 0.5];
        let mu0 = InitialLaw::gaussian(0.0, 0.5);
        let flow =
            reference_flow(model.as_ref(), &diff, &theta, 5000, &grid, &mu0, 77).unwrap();
        let paths =
            product_simulate(model.as_ref(), &diff, &theta, 2000, &flow, &mu0, 78).unwrap();
        let mom = OuMoments::from_initial_law(&theta, &mu0).unwrap();
        let emp = crate::stats::mean(paths.slice_at(grid.n_steps()));
        let se = (mom.variance(1.0) / 2000.0).sqrt();
        assert!((emp - mom.mean(1.0)).abs() <= 5.0 * se + 0.05, "{emp} vs {}", mom.mean(1.0));
    }

    #[test]
    fn moment_boundedness_across_n() {
        let model = ou_model();
        let diff = DiffusionSpec::identity(1);
        let grid = TimeGrid::uniform(1.0, 100).unwrap();
        let theta = [-1.0, 1.0, 0.5];
        let mu0 = InitialLaw::gaussian(0.0, 0.5);
        let mut worst = Vec::new();
        for n in [100usize, 1000, 10_000] {
            let paths = simulate_particles(model.as_ref(), &diff, &theta, n, &grid, &mu0, 6).unwrap();
            let mut max_m4: f64 = 0.0;
            for j in 0..=grid.n_steps() {
                max_m4 = max_m4.max(paths.measure_at(j).abs_moment(4.0));
            }
            worst.push(max_m4);
        }
        let lo = worst.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = worst.iter().cloned().fold(0.0, f64::max);
        assert!(hi / lo <= 2.0, "fourth-moment spread {worst:?}");
    }

    #[test]
    fn refinement_error_shrinks_with_m() {
        let spec = ModelSpec::new("mckean_ou", vec![-2.0, -1.0, 0.3], vec![-0.5, 1.0, 1.0]);
        let model = build_model(&spec).unwrap();
        let diff = DiffusionSpec::scalar(1, 0.05).unwrap();
        let theta = [-1.0, 0.0, 0.5];
        let n = 20_000;
        let mut errs = Vec::new();
        for m in [25usize, 50, 100, 200] {
            let grid = TimeGrid::uniform(1.0, m).unwrap();
            let paths = simulate_particles(
                model.as_ref(),
                &diff,
                &theta,
                n,
                &grid,
                &InitialLaw::point(1.0),
                44,
            )
            .unwrap();
            let emp = crate::stats::mean(paths.slice_at(m));
            errs.push((emp - (-1.0f64).exp()).abs());
        }
        // Discretization error dominates the (deliberately tiny) noise;
        // compare two-level gaps for robustness.
        assert!(errs[2] < errs[0], "errors {errs:?}");
        assert!(errs[3] < errs[1], "errors {errs:?}");
    }
}
