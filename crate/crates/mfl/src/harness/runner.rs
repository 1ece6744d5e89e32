//! Experiment runner: dispatch a validated [`ExperimentConfig`] to the
//! corresponding library operation and write its artifacts.
//!
//! Every run produces, in its output directory:
//!
//! - `config.txt` — the canonical config text (what the hash covers),
//! - one or more CSV artifacts with the raw per-replication rows,
//! - `summary.txt` — the `key: value` digest of the run,
//! - `manifest.json` — the [`RunManifest`] written last: config hash,
//!   artifact list with SHA-256 digests, versions, wall-clock seconds,
//!   and the pass/fail summary.
//!
//! All artifact contents are computed in memory before anything touches
//! the filesystem, so a failing experiment leaves no partial artifacts
//! behind; a write error removes whatever had been written. Re-running
//! the same config into a clean directory reproduces every artifact
//! byte for byte regardless of thread count — the manifest's wall-clock
//! field is the single deliberately non-reproducible value, which is why
//! the manifest itself is not listed as an artifact.
//!
//! A config whose `n` is a list is a sweep: each value becomes a child
//! run in `child-<idx>-n<value>/` with a seed derived from the parent's
//! (`derive_stream(seed, [2, idx])`), children run in parallel, and the
//! parent manifest aggregates every child artifact. Cross-N verdicts
//! (rate slopes, boundedness ratios) are the verify suites' job; the
//! sweep itself only aggregates per-child pass flags.
//!
//! Pass/fail semantics per kind: `lan`, `normality` and `nondegeneracy`
//! report their experiment's own pass flag, `fisher` passes when the
//! limit information is non-degenerate, `chaos-rate` when the fitted
//! slope is strictly negative, `identifiability` when the transform gap
//! is strictly positive. `simulate`, `estimate`, `risk` and `kl-proxy`
//! have no binary verdict and report `n/a`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::{
    chaos_rate, double_layer_fourier_scalar, identifiability_fourier_check, information_at,
    kl_proxy, lan_experiment, nondegeneracy_t0, normality_experiment, risk_experiment,
    ChaosReference, NondegOptions,
};
use crate::diffusion::DiffusionSpec;
use crate::error::{Error, Result};
use crate::estimate::{mle_linear, mle_numeric, Method, MleOptions};
use crate::harness::config::{
    parse_config_with_overrides, ExperimentConfig, ExperimentKind, MethodChoice, ReferenceChoice,
};
use crate::harness::csvio::{csv_text, write_text, Cell, Summary};
use crate::likelihood::{empirical_fisher, FisherMatrix};
use crate::measure::EmpiricalMeasure;
use crate::models::{build_model, DriftModel};
use crate::rng::{derive_stream, StreamRng};
use crate::simulate::{simulate_particles, TimeGrid};

/// Manifest format version, bumped on layout changes.
const MANIFEST_FORMAT: &str = "1";

/// One artifact file: path relative to the run directory, content
/// digest, size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Versions {
    /// Crate version that produced the run.
    pub package: String,
    /// Manifest format version.
    pub format: String,
}

/// Metadata record written as `manifest.json` after all artifacts.
///
/// `wall_clock_seconds` is informational and varies run to run; every
/// other field is deterministic for a given config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: String,
    /// SHA-256 of the canonical config text.
    pub config_hash: String,
    pub artifacts: Vec<ArtifactRecord>,
    pub versions: Versions,
    pub wall_clock_seconds: f64,
    /// `"pass"`, `"fail"`, or `"n/a"` for kinds without a verdict.
    pub summary: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use std::fmt::Write as _;
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for byte in digest {
        let _ = write!(out, "{byte:02x}");
    }
    out
}

/// Output directory for a run: explicit flag, then the config's `out`
/// key, then `mfl-runs/<kind>-<hash prefix>`.
pub fn resolve_out_dir(cfg: &ExperimentConfig, flag: Option<&Path>) -> PathBuf {
    if let Some(dir) = flag {
        return dir.to_path_buf();
    }
    if let Some(out) = &cfg.out {
        return PathBuf::from(out);
    }
    PathBuf::from("mfl-runs").join(format!("{}-{}", cfg.kind.name(), &cfg.config_hash[..8]))
}

/// Run one experiment (or a sweep) into `out_dir` and write its
/// artifacts plus `manifest.json`. Wall-clock progress goes to stderr;
/// nothing else escapes the output directory.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    let manifest =
        if cfg.is_sweep() { run_sweep(cfg, out_dir, started) } else { run_single(cfg, out_dir, started) }?;
    eprintln!(
        "[mfl] {} finished in {:.2}s: {} ({} artifacts in {})",
        manifest.kind,
        manifest.wall_clock_seconds,
        manifest.summary,
        manifest.artifacts.len(),
        out_dir.display()
    );
    Ok(manifest)
}

fn pass_label(pass: Option<bool>) -> &'static str {
    match pass {
        Some(true) => "pass",
        Some(false) => "fail",
        None => "n/a",
    }
}

/// Write the prepared files under `out_dir`; on any write error remove
/// what was already written and bail.
fn write_files(out_dir: &Path, files: &[(String, String)]) -> Result<Vec<ArtifactRecord>> {
    let mut written: Vec<PathBuf> = Vec::new();
    let mut records = Vec::with_capacity(files.len());
    for (name, content) in files {
        let path = out_dir.join(name);
        if let Err(e) = write_text(&path, content) {
            for w in &written {
                let _ = fs::remove_file(w);
            }
            return Err(e);
        }
        written.push(path);
        records.push(ArtifactRecord {
            path: name.clone(),
            sha256: sha256_hex(content.as_bytes()),
            bytes: content.len() as u64,
        });
    }
    Ok(records)
}

fn write_manifest(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    artifacts: Vec<ArtifactRecord>,
    summary: &str,
    started: Instant,
) -> Result<RunManifest> {
    let manifest = RunManifest {
        kind: cfg.kind.name().to_string(),
        config_hash: cfg.config_hash.clone(),
        artifacts,
        versions: Versions {
            package: env!("CARGO_PKG_VERSION").to_string(),
            format: MANIFEST_FORMAT.to_string(),
        },
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        summary: summary.to_string(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Io(format!("manifest serialization: {e}")))?;
    text.push('\n');
    write_text(&out_dir.join("manifest.json"), &text)?;
    Ok(manifest)
}

fn run_single(cfg: &ExperimentConfig, out_dir: &Path, started: Instant) -> Result<RunManifest> {
    let (files, pass) = artifacts_for(cfg)?;
    let records = write_files(out_dir, &files)?;
    write_manifest(cfg, out_dir, records, pass_label(pass), started)
}

fn run_sweep(cfg: &ExperimentConfig, out_dir: &Path, started: Instant) -> Result<RunManifest> {
    let children: Vec<(usize, usize)> = cfg.n_values.iter().copied().enumerate().collect();
    let results: Vec<(String, usize, Result<RunManifest>)> = children
        .par_iter()
        .map(|&(idx, n)| {
            let dir_name = format!("child-{idx:02}-n{n}");
            let child_seed = derive_stream(cfg.seed, &[2, idx as u64]).lo;
            let child = parse_config_with_overrides(
                &cfg.canonical_text,
                &[("n", n.to_string()), ("seed", child_seed.to_string())],
            )
            .and_then(|ccfg| run_single(&ccfg, &out_dir.join(&dir_name), Instant::now()));
            (dir_name, n, child)
        })
        .collect();

    if let Some((idx, (_, n, Err(first)))) =
        results.iter().enumerate().find(|(_, (_, _, r))| r.is_err())
    {
        for (dir_name, _, _) in &results {
            let _ = fs::remove_dir_all(out_dir.join(dir_name));
        }
        return Err(Error::Experiment(format!("sweep child {idx} (n = {n}): {first}")));
    }

    let mut summary = Summary::new();
    summary.push_str("kind", &format!("{} (sweep over n)", cfg.kind.name()));
    summary.push_str("model", &cfg.model.family);
    summary.push_int("children", results.len() as i64);
    summary.push_str(
        "n_values",
        &cfg.n_values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", "),
    );
    summary.push_str("seed", &cfg.seed.to_string());
    let mut n_pass = 0usize;
    let mut n_fail = 0usize;
    for (dir_name, _, result) in &results {
        let child = result.as_ref().expect("sweep errors returned above");
        summary.push_str(dir_name, &child.summary);
        match child.summary.as_str() {
            "pass" => n_pass += 1,
            "fail" => n_fail += 1,
            _ => {}
        }
    }
    let aggregate = if n_fail > 0 {
        "fail"
    } else if n_pass == results.len() {
        "pass"
    } else {
        "n/a"
    };
    summary.push_str("aggregate", aggregate);

    let files = vec![
        ("config.txt".to_string(), cfg.canonical_text.clone()),
        ("summary.txt".to_string(), summary.render()),
    ];
    let mut records = write_files(out_dir, &files)?;
    for (dir_name, _, result) in &results {
        let child = result.as_ref().expect("sweep errors returned above");
        for record in &child.artifacts {
            records.push(ArtifactRecord {
                path: format!("{dir_name}/{}", record.path),
                sha256: record.sha256.clone(),
                bytes: record.bytes,
            });
        }
    }
    write_manifest(cfg, out_dir, records, aggregate, started)
}

// ---------------------------------------------------------------------------
// Per-kind artifact builders
// ---------------------------------------------------------------------------

/// Compute every artifact of a single (non-sweep) run in memory:
/// `(file name, content)` pairs plus the pass verdict (`None` for kinds
/// without one).
fn artifacts_for(cfg: &ExperimentConfig) -> Result<(Vec<(String, String)>, Option<bool>)> {
    let mut files = vec![("config.txt".to_string(), cfg.canonical_text.clone())];
    // The Fourier separation check is closed-form and box-free; it is
    // dispatched before any model is built.
    let pass = if cfg.kind == ExperimentKind::Identifiability {
        identifiability_artifacts(cfg, &mut files)?
    } else {
        let model = build_model(&cfg.model)?;
        let diff = cfg.diffusion();
        match cfg.kind {
            ExperimentKind::Simulate => simulate_artifacts(cfg, model.as_ref(), &diff, &mut files)?,
            ExperimentKind::Estimate => estimate_artifacts(cfg, model.as_ref(), &diff, &mut files)?,
            ExperimentKind::Fisher => fisher_artifacts(cfg, model.as_ref(), &diff, &mut files)?,
            ExperimentKind::Lan => lan_artifacts(cfg, model.as_ref(), &diff, &mut files)?,
            ExperimentKind::Normality => normality_artifacts(cfg, model.as_ref(), &diff, &mut files)?,
            ExperimentKind::Risk => risk_artifacts(cfg, model.as_ref(), &diff, &mut files)?,
            ExperimentKind::ChaosRate => chaos_artifacts(cfg, model.as_ref(), &diff, &mut files)?,
            ExperimentKind::KlProxy => kl_artifacts(cfg, model.as_ref(), &diff, &mut files)?,
            ExperimentKind::Nondegeneracy => nondeg_artifacts(cfg, model.as_ref(), &diff, &mut files)?,
            ExperimentKind::Identifiability => unreachable!("dispatched above"),
        }
    };
    Ok((files, pass))
}

fn grid_for(cfg: &ExperimentConfig) -> Result<TimeGrid> {
    TimeGrid::uniform(cfg.t_horizon, cfg.m)
}

fn common_lines(summary: &mut Summary, cfg: &ExperimentConfig) {
    summary.push_str("kind", cfg.kind.name());
    summary.push_str("model", &cfg.model.family);
    summary.push_str("seed", &cfg.seed.to_string());
}

fn method_name(method: Method) -> &'static str {
    match method {
        Method::Linear => "linear",
        Method::Numeric => "numeric",
    }
}

/// Map the config's method choice onto the estimator, defaulting to the
/// closed-form solve exactly when the family is linear in θ.
fn resolve_method(cfg: &ExperimentConfig, model: &dyn DriftModel) -> Method {
    match cfg.method {
        MethodChoice::Linear => Method::Linear,
        MethodChoice::Numeric => Method::Numeric,
        MethodChoice::Auto => {
            if model.linear_in_theta() {
                Method::Linear
            } else {
                Method::Numeric
            }
        }
    }
}

/// Render a square matrix as CSV with `col_<k>` headers.
fn matrix_csv(mat: &nalgebra::DMatrix<f64>) -> String {
    let header: Vec<String> = (0..mat.ncols()).map(|k| format!("col_{k}")).collect();
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let rows: Vec<Vec<Cell>> = (0..mat.nrows())
        .map(|i| (0..mat.ncols()).map(|j| Cell::Float(mat[(i, j)])).collect())
        .collect();
    csv_text(&header_refs, &rows)
}

fn fisher_lines(summary: &mut Summary, label: &str, fisher: &FisherMatrix) {
    summary.push_f64(&format!("{label}_det"), fisher.det());
    summary.push_f64(&format!("{label}_trace"), fisher.trace());
    summary.push_f64(&format!("{label}_degeneracy_threshold"), fisher.degeneracy_threshold());
    summary.push_bool(&format!("{label}_degenerate"), fisher.is_degenerate());
}

fn simulate_artifacts(
    cfg: &ExperimentConfig,
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    files: &mut Vec<(String, String)>,
) -> Result<Option<bool>> {
    let grid = grid_for(cfg)?;
    let n = cfg.n();
    let paths = simulate_particles(model, diff, &cfg.theta, n, &grid, &cfg.mu0, cfg.seed)?;
    let d = paths.dim();

    let mut header = vec!["t".to_string(), "particle".to_string()];
    for k in 0..d {
        header.push(format!("x_{k}"));
    }
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut rows = Vec::with_capacity((cfg.m + 1) * n);
    for j in 0..=cfg.m {
        let t = grid.time(j);
        let slice = paths.slice_at(j);
        for i in 0..n {
            let mut row: Vec<Cell> = Vec::with_capacity(2 + d);
            row.push(Cell::Float(t));
            row.push(Cell::Int(i as i64));
            for k in 0..d {
                row.push(Cell::Float(slice[i * d + k]));
            }
            rows.push(row);
        }
    }
    files.push(("paths.csv".to_string(), csv_text(&header_refs, &rows)));

    let horizon = paths.measure_at(cfg.m);
    let mean = horizon.mean().to_vec();
    let mut var = vec![0.0; d];
    for atom in horizon.iter_atoms() {
        for k in 0..d {
            let c = atom[k] - mean[k];
            var[k] += c * c;
        }
    }
    let denom = (n as f64 - 1.0).max(1.0);
    for v in &mut var {
        *v /= denom;
    }

    let mut summary = Summary::new();
    common_lines(&mut summary, cfg);
    summary.push_int("n", n as i64);
    summary.push_int("d", d as i64);
    summary.push_f64("t", cfg.t_horizon);
    summary.push_int("m", cfg.m as i64);
    summary.push_vec("theta", &cfg.theta);
    summary.push_vec("final_mean", &mean);
    summary.push_vec("final_var", &var);
    files.push(("summary.txt".to_string(), summary.render()));
    Ok(None)
}

fn estimate_artifacts(
    cfg: &ExperimentConfig,
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    files: &mut Vec<(String, String)>,
) -> Result<Option<bool>> {
    let grid = grid_for(cfg)?;
    let paths = simulate_particles(model, diff, &cfg.theta, cfg.n(), &grid, &cfg.mu0, cfg.seed)?;
    let est = match resolve_method(cfg, model) {
        Method::Linear => mle_linear(model, diff, &paths)?,
        Method::Numeric => {
            let opts =
                MleOptions { seed: derive_stream(cfg.seed, &[4]).lo, ..MleOptions::default() };
            mle_numeric(model, diff, &paths, &opts)?
        }
    };

    let rows: Vec<Vec<Cell>> = (0..cfg.theta.len())
        .map(|k| vec![Cell::Int(k as i64), Cell::Float(cfg.theta[k]), Cell::Float(est.theta_hat[k])])
        .collect();
    files.push((
        "estimate.csv".to_string(),
        csv_text(&["coord", "theta_true", "theta_hat"], &rows),
    ));

    let mut summary = Summary::new();
    common_lines(&mut summary, cfg);
    summary.push_int("n", cfg.n() as i64);
    summary.push_str("method", method_name(est.method));
    summary.push_bool("converged", est.converged);
    summary.push_int("iterations", est.iterations as i64);
    summary.push_f64("loglik", est.loglik);
    summary.push_f64("score_norm", est.score_norm);
    summary.push_str(
        "boundary_active",
        &est.boundary_active.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(", "),
    );
    files.push(("summary.txt".to_string(), summary.render()));
    Ok(None)
}

fn fisher_artifacts(
    cfg: &ExperimentConfig,
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    files: &mut Vec<(String, String)>,
) -> Result<Option<bool>> {
    let grid = grid_for(cfg)?;
    let paths = simulate_particles(model, diff, &cfg.theta, cfg.n(), &grid, &cfg.mu0, cfg.seed)?;
    let empirical = empirical_fisher(model, diff, &cfg.theta, &paths)?;
    let limit = information_at(model, diff, &cfg.theta, &grid, &cfg.mu0, cfg.seed)?;
    files.push(("fisher_empirical.csv".to_string(), matrix_csv(empirical.matrix())));
    files.push(("fisher_limit.csv".to_string(), matrix_csv(limit.matrix())));

    let mut summary = Summary::new();
    common_lines(&mut summary, cfg);
    summary.push_int("n", cfg.n() as i64);
    summary.push_vec("theta", &cfg.theta);
    fisher_lines(&mut summary, "empirical", &empirical);
    fisher_lines(&mut summary, "limit", &limit);
    summary.push_f64("frobenius_distance", (empirical.matrix() - limit.matrix()).norm());
    let pass = !limit.is_degenerate();
    summary.push_str("verdict", pass_label(Some(pass)));
    files.push(("summary.txt".to_string(), summary.render()));
    Ok(Some(pass))
}

fn lan_artifacts(
    cfg: &ExperimentConfig,
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    files: &mut Vec<(String, String)>,
) -> Result<Option<bool>> {
    let grid = grid_for(cfg)?;
    let u = cfg.u.as_deref().expect("lan config carries a direction");
    let report =
        lan_experiment(model, diff, &cfg.theta, u, cfg.n(), &grid, &cfg.mu0, cfg.r, cfg.seed)?;

    let rows: Vec<Vec<Cell>> = report
        .samples
        .iter()
        .enumerate()
        .map(|(rep, &zeta)| vec![Cell::Int(rep as i64), Cell::Float(zeta)])
        .collect();
    files.push(("lan.csv".to_string(), csv_text(&["rep", "zeta"], &rows)));

    let mut summary = Summary::new();
    common_lines(&mut summary, cfg);
    summary.push_vec("u", &report.u);
    summary.push_int("n", report.n as i64);
    summary.push_int("r", report.r as i64);
    summary.push_f64("empirical_mean", report.empirical_mean);
    summary.push_f64("empirical_var", report.empirical_var);
    summary.push_f64("predicted_mean", report.predicted_mean);
    summary.push_f64("predicted_var", report.predicted_var);
    summary.push_f64("ks_stat", report.ks_stat);
    summary.push_f64("ks_pvalue", report.ks_pvalue);
    summary.push_bool("pass_mean", report.pass_mean);
    summary.push_bool("pass_ks", report.pass_ks);
    summary.push_bool("trivially_degenerate", report.trivially_degenerate);
    let pass = report.pass();
    summary.push_str("verdict", pass_label(Some(pass)));
    files.push(("summary.txt".to_string(), summary.render()));
    Ok(Some(pass))
}

fn normality_artifacts(
    cfg: &ExperimentConfig,
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    files: &mut Vec<(String, String)>,
) -> Result<Option<bool>> {
    let grid = grid_for(cfg)?;
    let method = resolve_method(cfg, model);
    let report = normality_experiment(
        model, diff, &cfg.theta, cfg.n(), &grid, &cfg.mu0, cfg.r, cfg.seed, method,
    )?;

    let p = cfg.theta.len();
    let mut header = vec!["row".to_string()];
    for k in 0..p {
        header.push(format!("err_{k}"));
    }
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let rows: Vec<Vec<Cell>> = report
        .standardized_errors
        .iter()
        .enumerate()
        .map(|(i, err)| {
            let mut row: Vec<Cell> = Vec::with_capacity(1 + p);
            row.push(Cell::Int(i as i64));
            row.extend(err.iter().map(|&v| Cell::Float(v)));
            row
        })
        .collect();
    files.push(("normality.csv".to_string(), csv_text(&header_refs, &rows)));
    files.push(("covariance.csv".to_string(), matrix_csv(&report.covariance)));

    let mut summary = Summary::new();
    common_lines(&mut summary, cfg);
    summary.push_int("n", report.n as i64);
    summary.push_int("r", report.r as i64);
    summary.push_str("method", method_name(report.method));
    summary.push_int("n_failed", report.n_failed as i64);
    summary.push_vec("ks_stats", &report.ks_stats);
    summary.push_vec("ks_pvalues", &report.ks_pvalues);
    summary.push_f64("cov_frobenius_error", report.cov_frobenius_error);
    summary.push_bool("pass_ks", report.pass_ks);
    summary.push_bool("pass_cov", report.pass_cov);
    let pass = report.pass();
    summary.push_str("verdict", pass_label(Some(pass)));
    files.push(("summary.txt".to_string(), summary.render()));
    Ok(Some(pass))
}

fn risk_artifacts(
    cfg: &ExperimentConfig,
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    files: &mut Vec<(String, String)>,
) -> Result<Option<bool>> {
    let grid = grid_for(cfg)?;
    let report = risk_experiment(
        model, diff, &cfg.theta, &cfg.loss, cfg.n(), &grid, &cfg.mu0, cfg.r, cfg.seed,
    )?;

    let rows: Vec<Vec<Cell>> = report
        .samples
        .iter()
        .enumerate()
        .map(|(rep, &v)| vec![Cell::Int(rep as i64), Cell::Float(v)])
        .collect();
    files.push(("risk.csv".to_string(), csv_text(&["rep", "loss_value"], &rows)));

    let mut summary = Summary::new();
    common_lines(&mut summary, cfg);
    summary.push_str("loss", &report.loss);
    summary.push_int("n", cfg.n() as i64);
    summary.push_int("r", cfg.r as i64);
    summary.push_int("n_failed", report.n_failed as i64);
    summary.push_f64("empirical_risk", report.empirical_risk);
    summary.push_f64("se", report.se);
    summary.push_f64("gaussian_bound", report.gaussian_bound);
    summary.push_f64("ratio", report.ratio);
    files.push(("summary.txt".to_string(), summary.render()));
    Ok(None)
}

fn chaos_artifacts(
    cfg: &ExperimentConfig,
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    files: &mut Vec<(String, String)>,
) -> Result<Option<bool>> {
    let grid = grid_for(cfg)?;
    let max_level = *cfg.levels.last().expect("validated levels are non-empty");
    // Reference-cloud default: an order of magnitude above the largest
    // particle count, and never below the reference-flow floor.
    let n_ref = cfg.n_ref.unwrap_or_else(|| (10 * max_level).max(1000));
    let closed_form_available =
        model.name() == "mckean_ou" && model.state_dim() == 1 && cfg.sigma == 1.0;
    let reference = match cfg.reference {
        ReferenceChoice::Gaussian => ChaosReference::GaussianClosedForm,
        ReferenceChoice::Cloud => ChaosReference::Cloud { n_ref },
        ReferenceChoice::Auto => {
            if closed_form_available {
                ChaosReference::GaussianClosedForm
            } else {
                ChaosReference::Cloud { n_ref }
            }
        }
    };
    let reference_name = match reference {
        ChaosReference::GaussianClosedForm => "gaussian-closed-form",
        ChaosReference::Cloud { .. } => "cloud",
    };
    let report = chaos_rate(
        model, diff, &cfg.theta, &cfg.levels, &grid, &cfg.mu0, cfg.r, cfg.seed, &reference,
    )?;

    let mut rows = Vec::with_capacity(cfg.levels.len() * cfg.r);
    for (li, &level) in report.levels.iter().enumerate() {
        for (rep, &dist) in report.distances[li].iter().enumerate() {
            rows.push(vec![Cell::Int(level as i64), Cell::Int(rep as i64), Cell::Float(dist)]);
        }
    }
    files.push(("chaos.csv".to_string(), csv_text(&["level", "rep", "distance"], &rows)));

    let mut summary = Summary::new();
    common_lines(&mut summary, cfg);
    summary.push_str(
        "levels",
        &report.levels.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", "),
    );
    summary.push_int("r", cfg.r as i64);
    summary.push_str("reference", reference_name);
    summary.push_int("n_ref", report.n_ref as i64);
    summary.push_vec("medians", &report.medians);
    summary.push_f64("slope", report.slope);
    summary.push_f64("intercept", report.intercept);
    let pass = report.slope < 0.0;
    summary.push_str("verdict", pass_label(Some(pass)));
    files.push(("summary.txt".to_string(), summary.render()));
    Ok(Some(pass))
}

fn kl_artifacts(
    cfg: &ExperimentConfig,
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    files: &mut Vec<(String, String)>,
) -> Result<Option<bool>> {
    let grid = grid_for(cfg)?;
    let n = cfg.n();
    let n_ref = cfg.n_ref.unwrap_or_else(|| (10 * n).max(1000));
    let report = kl_proxy(model, diff, &cfg.theta, n, &grid, &cfg.mu0, cfg.r, cfg.seed, n_ref)?;

    let rows: Vec<Vec<Cell>> = report
        .samples
        .iter()
        .enumerate()
        .map(|(rep, &v)| vec![Cell::Int(rep as i64), Cell::Float(v)])
        .collect();
    files.push(("kl.csv".to_string(), csv_text(&["rep", "value"], &rows)));

    let mut summary = Summary::new();
    common_lines(&mut summary, cfg);
    summary.push_int("n", report.n as i64);
    summary.push_int("r", cfg.r as i64);
    summary.push_int("n_ref", report.n_ref as i64);
    summary.push_f64("estimate", report.estimate);
    summary.push_f64("se", report.se);
    files.push(("summary.txt".to_string(), summary.render()));
    Ok(None)
}

fn nondeg_artifacts(
    cfg: &ExperimentConfig,
    model: &dyn DriftModel,
    diff: &DiffusionSpec,
    files: &mut Vec<(String, String)>,
) -> Result<Option<bool>> {
    let d = model.state_dim();
    let atoms = match &cfg.mu0_atoms {
        Some(atoms) => atoms.clone(),
        None => {
            cfg.mu0.validate(d)?;
            let mut rng = StreamRng::new(cfg.seed, &[3]);
            let mut buf = vec![0.0; cfg.mu0_n * d];
            for chunk in buf.chunks_mut(d) {
                cfg.mu0.sample_into(&mut rng, chunk);
            }
            buf
        }
    };
    let measure = EmpiricalMeasure::from_atoms(atoms, d)?;
    let opts = NondegOptions {
        n_random_pairs: cfg.n_pairs,
        n_directions: cfg.n_directions,
        n_x: cfg.n_x,
        seed: cfg.seed,
    };
    let report = nondegeneracy_t0(model, diff, model.param_box(), &measure, &opts)?;

    let header = ["coord", "witness_theta", "witness_theta_prime", "witness_z"];
    let rows: Vec<Vec<Cell>> = match &report.witness {
        Some(w) => (0..w.theta.len())
            .map(|k| {
                vec![
                    Cell::Int(k as i64),
                    Cell::Float(w.theta[k]),
                    Cell::Float(w.theta_prime[k]),
                    Cell::Float(w.z[k]),
                ]
            })
            .collect(),
        None => vec![],
    };
    files.push(("witness.csv".to_string(), csv_text(&header, &rows)));

    let mut summary = Summary::new();
    common_lines(&mut summary, cfg);
    summary.push_int("atoms", measure.n_atoms() as i64);
    summary.push_int("n_pairs", report.n_pairs as i64);
    summary.push_int("n_directions", report.n_directions as i64);
    summary.push_int("n_x", report.n_x as i64);
    summary.push_f64("threshold", report.threshold);
    summary.push_f64("min_max_over_x", report.min_max_over_x);
    summary.push_bool("non_degenerate", report.non_degenerate);
    if let Some(w) = &report.witness {
        summary.push_f64("witness_max_over_x", w.max_over_x);
    }
    summary.push_str("verdict", pass_label(Some(report.non_degenerate)));
    files.push(("summary.txt".to_string(), summary.render()));
    Ok(Some(report.non_degenerate))
}

fn identifiability_artifacts(
    cfg: &ExperimentConfig,
    files: &mut Vec<(String, String)>,
) -> Result<Option<bool>> {
    let d = cfg.model.d.max(1);
    let theta_prime = cfg.theta_prime.as_deref().expect("validated config carries theta_prime");
    let steps = (cfg.xi_points - 1) as f64;
    let xi_grid: Vec<f64> =
        (0..cfg.xi_points).map(|k| cfg.xi_max * k as f64 / steps).collect();
    let max_gap = identifiability_fourier_check(&cfg.theta, theta_prime, d, &xi_grid)?;

    let mut rows = Vec::with_capacity(xi_grid.len());
    for &xi in &xi_grid {
        let a = double_layer_fourier_scalar(&cfg.theta, d, xi)?;
        let b = double_layer_fourier_scalar(theta_prime, d, xi)?;
        rows.push(vec![
            Cell::Float(xi),
            Cell::Float(a),
            Cell::Float(b),
            Cell::Float(xi.abs() * (a - b).abs()),
        ]);
    }
    files.push((
        "fourier.csv".to_string(),
        csv_text(&["xi", "s_theta", "s_theta_prime", "gap"], &rows),
    ));

    let mut summary = Summary::new();
    summary.push_str("kind", cfg.kind.name());
    summary.push_str("model", &cfg.model.family);
    summary.push_int("d", d as i64);
    summary.push_vec("theta", &cfg.theta);
    summary.push_vec("theta_prime", theta_prime);
    summary.push_f64("xi_max", cfg.xi_max);
    summary.push_int("xi_points", cfg.xi_points as i64);
    summary.push_f64("max_gap", max_gap);
    let pass = max_gap > 0.0;
    summary.push_bool("separated", pass);
    summary.push_str("verdict", pass_label(Some(pass)));
    files.push(("summary.txt".to_string(), summary.render()));
    Ok(Some(pass))
}
