//! Pre-registration pilot for the empirically derived verification bands.
//!
//! Two constants in the verification suite are empirical rather than
//! theorem-given:
//!
//! * `CHAOS_SLOPE_BAND` — the band the log-log Wasserstein-decay slope
//!   must fall into over N = 100, 1000, 10000, and
//! * `COV_FROB_TOL` — the normalized Frobenius tolerance on the
//!   estimator covariance in the normality experiment.
//!
//! This pilot derives both from brute-force oracles that share no code
//! with the production distance and report paths: the Wasserstein-1
//! distance is computed as a quantile-grid integral against the
//! closed-form Gaussian marginal (inverse CDF from `statrs`), and the
//! covariance yardstick from direct sampling of the ideal Gaussian
//! limit. It replicates the full suite statistic under fresh seeds and
//! prints the observed spread next to the registered constants, exiting
//! 1 if a registered constant is inconsistent with what it measured.
//!
//! Run with `cargo run --release --bin pilot` before changing either
//! registered constant.

use std::process::ExitCode;

use statrs::distribution::ContinuousCDF;

use mfl::diagnostics::COV_FROB_TOL;
use mfl::diffusion::DiffusionSpec;
use mfl::harness::verify::CHAOS_SLOPE_BAND;
use mfl::models::{build_model, ModelSpec};
use mfl::rng::{derive_stream, StreamRng};
use mfl::simulate::{simulate_particles, InitialLaw, OuMoments, TimeGrid};

/// Root seed of the pilot itself — deliberately different from every
/// seed the verification suite uses, so the band is registered out of
/// sample.
const PILOT_SEED: u64 = 0x9104;

/// Suite-replica count: how many times the full slope statistic is
/// recomputed under fresh seeds.
const SUITE_REPLICAS: usize = 16;

/// Quantile-grid resolution of the brute-force Wasserstein integral.
const W1_GRID: usize = 16_384;

/// Fixture shared with the suite's chaos criterion: the interacting
/// Ornstein-Uhlenbeck family, N in decades, 20 replications per level.
const THETA: [f64; 3] = [-1.0, 1.0, 0.5];
const LEVELS: [usize; 3] = [100, 1000, 10_000];
const T_HORIZON: f64 = 1.0;
const M_STEPS: usize = 100;
const REPS_PER_LEVEL: usize = 20;

fn main() -> ExitCode {
    match pilot() {
        Ok(consistent) => {
            if consistent {
                println!("\npilot: registered constants are consistent with the measured bands");
                ExitCode::SUCCESS
            } else {
                println!("\npilot: REGISTERED CONSTANTS ARE OUTSIDE THE MEASURED BANDS");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("pilot failed: {e}");
            ExitCode::from(1)
        }
    }
}

fn pilot() -> mfl::Result<bool> {
    let slopes = chaos_slopes()?;
    let (lo, hi) = CHAOS_SLOPE_BAND;
    let (s_min, s_max) = (slopes[0], slopes[slopes.len() - 1]);
    let s_med = 0.5 * (slopes[slopes.len() / 2] + slopes[(slopes.len() - 1) / 2]);
    println!(
        "chaos slope: {SUITE_REPLICAS} suite replicas, slopes in [{s_min:.3}, {s_max:.3}], median {s_med:.3}"
    );
    println!("  registered band [{lo}, {hi}]");
    let slope_ok = s_min >= lo && s_max <= hi;
    println!("  all pilot slopes inside the registered band: {slope_ok}");

    let (e_mean, e_q99, e_max) = covariance_yardstick();
    println!(
        "covariance error (ideal Gaussian limit, R = 200, p = 3): mean {e_mean:.3}, q99 {e_q99:.3}, max {e_max:.3}"
    );
    println!("  registered tolerance {COV_FROB_TOL}");
    // The registered tolerance must clear the ideal-sampling 99% quantile
    // with real headroom, since the estimator also carries finite-N and
    // discretization error on top of pure sampling noise.
    let cov_ok = COV_FROB_TOL > e_q99;
    println!("  tolerance exceeds the ideal-sampling q99: {cov_ok}");

    Ok(slope_ok && cov_ok)
}

/// Replicate the suite's slope statistic `SUITE_REPLICAS` times under
/// fresh seeds; returns the sorted slopes.
fn chaos_slopes() -> mfl::Result<Vec<f64>> {
    let model = build_model(&ModelSpec::new(
        "mckean_ou",
        vec![-2.0, 0.0, 0.1],
        vec![-0.5, 2.0, 1.0],
    ))?;
    let diff = DiffusionSpec::identity(1);
    let grid = TimeGrid::uniform(T_HORIZON, M_STEPS)?;
    let mu0 = InitialLaw::gaussian(0.0, 0.5);
    let moments = OuMoments::from_initial_law(&THETA, &mu0)?;
    let (mean_t, sd_t) = (moments.mean(T_HORIZON), moments.variance(T_HORIZON).sqrt());
    let reference = statrs::distribution::Normal::new(mean_t, sd_t)
        .map_err(|e| mfl::Error::Domain(format!("reference marginal: {e}")))?;

    let mut slopes = Vec::with_capacity(SUITE_REPLICAS);
    for replica in 0..SUITE_REPLICAS {
        let mut log_ns = Vec::with_capacity(LEVELS.len());
        let mut log_medians = Vec::with_capacity(LEVELS.len());
        for (li, &n) in LEVELS.iter().enumerate() {
            let mut dists = Vec::with_capacity(REPS_PER_LEVEL);
            for rep in 0..REPS_PER_LEVEL {
                let seed =
                    derive_stream(PILOT_SEED, &[replica as u64, li as u64, rep as u64]).lo;
                let paths =
                    simulate_particles(model.as_ref(), &diff, &THETA, n, &grid, &mu0, seed)?;
                let mut xs = paths.slice_at(grid.n_steps()).to_vec();
                xs.sort_by(f64::total_cmp);
                dists.push(quantile_grid_w1(&xs, &reference));
            }
            dists.sort_by(f64::total_cmp);
            let median = 0.5 * (dists[REPS_PER_LEVEL / 2] + dists[(REPS_PER_LEVEL - 1) / 2]);
            log_ns.push((n as f64).ln());
            log_medians.push(median.ln());
        }
        slopes.push(slope(&log_ns, &log_medians));
        eprintln!(
            "  [pilot] chaos replica {}/{SUITE_REPLICAS}: slope {:.3}",
            replica + 1,
            slopes[replica]
        );
    }
    slopes.sort_by(f64::total_cmp);
    Ok(slopes)
}

/// Brute-force W1 between a sorted sample and a continuous reference,
/// as the quantile-function integral on a uniform midpoint grid.
fn quantile_grid_w1(sorted: &[f64], reference: &impl ContinuousCDF<f64, f64>) -> f64 {
    let n = sorted.len();
    let mut acc = 0.0;
    for j in 0..W1_GRID {
        let u = (j as f64 + 0.5) / W1_GRID as f64;
        let sample_q = sorted[((u * n as f64) as usize).min(n - 1)];
        acc += (sample_q - reference.inverse_cdf(u)).abs();
    }
    acc / W1_GRID as f64
}

/// Ordinary least-squares slope of y on x.
fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Distribution of the normalized covariance Frobenius error when the
/// estimator errors are exactly iid standard Gaussian vectors — the
/// ideal limit the normality experiment converges to. Returns
/// (mean, 99% quantile, max) over Monte Carlo replicates.
fn covariance_yardstick() -> (f64, f64, f64) {
    const R: usize = 200; // replications per covariance, as in the suite
    const P: usize = 3; // parameter dimension
    const MC: usize = 2000;
    let mut errors = Vec::with_capacity(MC);
    let mut rng = StreamRng::new(PILOT_SEED, &[1]);
    let mut draws = vec![0.0f64; R * P];
    for _ in 0..MC {
        rng.fill_normals(&mut draws);
        let mut mean = [0.0f64; P];
        for row in draws.chunks_exact(P) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= R as f64);
        let mut cov = [[0.0f64; P]; P];
        for row in draws.chunks_exact(P) {
            for a in 0..P {
                for b in 0..P {
                    cov[a][b] += (row[a] - mean[a]) * (row[b] - mean[b]);
                }
            }
        }
        let mut frob2 = 0.0;
        for a in 0..P {
            for b in 0..P {
                let c = cov[a][b] / (R as f64 - 1.0) - if a == b { 1.0 } else { 0.0 };
                frob2 += c * c;
            }
        }
        errors.push((frob2 / P as f64).sqrt());
    }
    errors.sort_by(f64::total_cmp);
    let mean = errors.iter().sum::<f64>() / MC as f64;
    (mean, errors[(MC as f64 * 0.99) as usize], errors[MC - 1])
}
