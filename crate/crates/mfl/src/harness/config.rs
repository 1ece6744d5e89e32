//! Declarative experiment configuration.
//!
//! Configs are flat UTF-8 `key = value` files: `#` starts a comment,
//! blank lines are ignored, and list values are comma-separated (an
//! optional surrounding `[...]` is tolerated). There is no expression
//! evaluation: every function-valued choice (drift family, kernels,
//! link, loss) is a name resolved in a registry.
//!
//! Parsing is total: all problems found in one pass are collected into a
//! single [`Error::Config`] rather than stopping at the first. Unknown
//! keys are errors, not warnings, and duplicate keys report both lines.
//!
//! The canonical form of a config (keys sorted, whitespace normalized,
//! the non-semantic `out` key dropped) is hashed with SHA-256; the hash
//! is what run manifests record, so reordering keys in the file does not
//! change the manifest.
//!
//! ## Keys
//!
//! Common: `kind`, `model`, `d`, `lower`, `upper`, `kernel_f`,
//! `kernel_g`, `link`, `sigma`, `theta`, `seed`, `out`,
//! `mu0` (point|gaussian|uniform) with `mu0_mean`/`mu0_var`/`mu0_value`/
//! `mu0_lower`/`mu0_upper` (scalars broadcast to dimension d).
//!
//! Per kind:
//! - `simulate`, `estimate` (`method`), `fisher`: `n`, `t`, `m`
//! - `lan`: `u`, `n`, `t`, `m`, `r`
//! - `normality` (`method`), `risk` (`loss`): `n`, `t`, `m`, `r`
//! - `chaos-rate`: `levels`, `t`, `m`, `r`, `reference`, `n_ref`
//! - `kl-proxy`: `n`, `t`, `m`, `r`, `n_ref`
//! - `nondegeneracy`: `mu0_atoms` (or `mu0_n` to sample from `mu0`),
//!   `n_pairs`, `n_directions`, `n_x`
//! - `identifiability`: `theta_prime`, `xi_max`, `xi_points`
//!
//! `n` may be a list; that makes the run a sweep expanded into child
//! runs with derived seeds (one sweep axis per config).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::diffusion::DiffusionSpec;
use crate::error::{Error, Result};
use crate::models::{build_model, validate_theta, ModelSpec};
use crate::simulate::InitialLaw;

/// The ten experiment kinds one invocation can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Simulate,
    Estimate,
    Fisher,
    Lan,
    Normality,
    Risk,
    ChaosRate,
    KlProxy,
    Nondegeneracy,
    Identifiability,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::Estimate => "estimate",
            ExperimentKind::Fisher => "fisher",
            ExperimentKind::Lan => "lan",
            ExperimentKind::Normality => "normality",
            ExperimentKind::Risk => "risk",
            ExperimentKind::ChaosRate => "chaos-rate",
            ExperimentKind::KlProxy => "kl-proxy",
            ExperimentKind::Nondegeneracy => "nondegeneracy",
            ExperimentKind::Identifiability => "identifiability",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ExperimentKind::all().into_iter().find(|k| k.name() == name)
    }

    pub fn all() -> [ExperimentKind; 10] {
        [
            ExperimentKind::Simulate,
            ExperimentKind::Estimate,
            ExperimentKind::Fisher,
            ExperimentKind::Lan,
            ExperimentKind::Normality,
            ExperimentKind::Risk,
            ExperimentKind::ChaosRate,
            ExperimentKind::KlProxy,
            ExperimentKind::Nondegeneracy,
            ExperimentKind::Identifiability,
        ]
    }
}

/// Estimation method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodChoice {
    /// Normal equations when the family is linear in θ, numeric
    /// otherwise.
    Auto,
    Linear,
    Numeric,
}

/// Reference-measure selector for `chaos-rate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceChoice {
    /// Closed-form Gaussian when available, otherwise a cloud.
    Auto,
    Gaussian,
    Cloud,
}

/// A parsed, fully validated experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub model: ModelSpec,
    pub sigma: f64,
    pub theta: Vec<f64>,
    pub theta_prime: Option<Vec<f64>>,
    pub u: Option<Vec<f64>>,
    pub loss: String,
    pub levels: Vec<usize>,
    pub reference: ReferenceChoice,
    pub method: MethodChoice,
    /// Particle counts; more than one entry makes this run a sweep.
    pub n_values: Vec<usize>,
    pub t_horizon: f64,
    pub m: usize,
    pub r: usize,
    pub n_ref: Option<usize>,
    pub seed: u64,
    pub mu0: InitialLaw,
    /// Explicit criterion sample for `nondegeneracy` (flat, row-major).
    pub mu0_atoms: Option<Vec<f64>>,
    /// Sample size drawn from `mu0` when `mu0_atoms` is absent.
    pub mu0_n: usize,
    pub n_pairs: usize,
    pub n_directions: usize,
    pub n_x: usize,
    pub xi_max: f64,
    pub xi_points: usize,
    pub out: Option<String>,
    /// Canonicalized text (sorted keys, `out` removed).
    pub canonical_text: String,
    /// SHA-256 of the canonical text, lowercase hex.
    pub config_hash: String,
}

impl ExperimentConfig {
    /// Particle count for single-run kinds (first sweep value otherwise).
    pub fn n(&self) -> usize {
        self.n_values.first().copied().unwrap_or(0)
    }

    pub fn is_sweep(&self) -> bool {
        self.n_values.len() > 1
    }

    /// The diffusion coefficient as a spec (scalar σ·Id).
    pub fn diffusion(&self) -> DiffusionSpec {
        DiffusionSpec::scalar(self.model.d, self.sigma)
            .expect("validated sigma builds a diffusion spec")
    }
}

struct RawEntry {
    value: String,
    line: usize,
}

fn line_label(line: usize) -> String {
    if line == 0 {
        "command line".to_string()
    } else {
        format!("line {line}")
    }
}

fn parse_raw(text: &str) -> (BTreeMap<String, RawEntry>, Vec<String>) {
    let mut map: BTreeMap<String, RawEntry> = BTreeMap::new();
    let mut errors = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let stripped = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        };
        let s = stripped.trim();
        if s.is_empty() {
            continue;
        }
        let Some(eq) = s.find('=') else {
            errors.push(format!("line {line}: expected `key = value`, got `{s}`"));
            continue;
        };
        let key = s[..eq].trim();
        let value = s[eq + 1..].trim();
        if key.is_empty()
            || !key.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
        {
            errors.push(format!("line {line}: invalid key `{key}` (keys are lowercase snake_case)"));
            continue;
        }
        if value.is_empty() {
            errors.push(format!("line {line}: empty value for key `{key}`"));
            continue;
        }
        if let Some(prev) = map.get(key) {
            errors.push(format!(
                "line {line}: duplicate key `{key}` (first set on {})",
                line_label(prev.line)
            ));
            continue;
        }
        map.insert(key.to_string(), RawEntry { value: value.to_string(), line });
    }
    (map, errors)
}

/// Strip one optional `[...]` wrapper and split a list on commas.
fn list_tokens(value: &str) -> Vec<String> {
    let trimmed = value.trim();
    let inner = trimmed
        .strip_prefix('[')
        .and_then(|rest| rest.strip_suffix(']'))
        .unwrap_or(trimmed);
    inner.split(',').map(|t| t.trim().to_string()).collect()
}

/// Accessor layer over the raw map: records every key it touches so the
/// leftovers can be reported as unknown, and collects all type errors.
struct Ctx<'a> {
    map: &'a BTreeMap<String, RawEntry>,
    used: BTreeSet<String>,
    errors: Vec<String>,
}

impl<'a> Ctx<'a> {
    fn new(map: &'a BTreeMap<String, RawEntry>, errors: Vec<String>) -> Self {
        Ctx { map, used: BTreeSet::new(), errors }
    }

    fn touch(&mut self, key: &str) -> Option<&'a RawEntry> {
        self.used.insert(key.to_string());
        self.map.get(key)
    }

    fn err(&mut self, msg: String) {
        self.errors.push(msg);
    }

    fn opt_str(&mut self, key: &str) -> Option<String> {
        self.touch(key).map(|e| e.value.clone())
    }

    fn req_str(&mut self, key: &str) -> Option<String> {
        let v = self.opt_str(key);
        if v.is_none() {
            self.err(format!("missing required key `{key}`"));
        }
        v
    }

    fn parse_scalar<T: std::str::FromStr>(&mut self, key: &str, kind: &str) -> Option<(T, usize)> {
        let entry = self.touch(key)?;
        match entry.value.parse::<T>() {
            Ok(v) => Some((v, entry.line)),
            Err(_) => {
                let (value, line) = (entry.value.clone(), entry.line);
                self.err(format!(
                    "{}: key `{key}`: `{value}` is not a valid {kind}",
                    line_label(line)
                ));
                None
            }
        }
    }

    fn opt_f64(&mut self, key: &str, default: f64) -> f64 {
        match self.parse_scalar::<f64>(key, "number") {
            Some((v, line)) => {
                if !v.is_finite() {
                    self.err(format!("{}: key `{key}` must be finite", line_label(line)));
                    default
                } else {
                    v
                }
            }
            None => default,
        }
    }

    fn req_f64(&mut self, key: &str) -> Option<f64> {
        if self.touch(key).is_none() {
            self.err(format!("missing required key `{key}`"));
            return None;
        }
        let (v, line) = self.parse_scalar::<f64>(key, "number")?;
        if !v.is_finite() {
            self.err(format!("{}: key `{key}` must be finite", line_label(line)));
            return None;
        }
        Some(v)
    }

    fn opt_usize(&mut self, key: &str, default: usize) -> usize {
        self.parse_scalar::<usize>(key, "non-negative integer").map(|(v, _)| v).unwrap_or(default)
    }

    fn req_usize(&mut self, key: &str) -> Option<usize> {
        if self.touch(key).is_none() {
            self.err(format!("missing required key `{key}`"));
            return None;
        }
        self.parse_scalar::<usize>(key, "non-negative integer").map(|(v, _)| v)
    }

    fn req_u64(&mut self, key: &str) -> Option<u64> {
        if self.touch(key).is_none() {
            self.err(format!("missing required key `{key}`"));
            return None;
        }
        self.parse_scalar::<u64>(key, "unsigned integer").map(|(v, _)| v)
    }

    fn f64_list(&mut self, key: &str) -> Option<Vec<f64>> {
        let entry = self.touch(key)?;
        let (value, line) = (entry.value.clone(), entry.line);
        let mut out = Vec::new();
        for tok in list_tokens(&value) {
            match tok.parse::<f64>() {
                Ok(v) if v.is_finite() => out.push(v),
                _ => {
                    self.err(format!(
                        "{}: key `{key}`: `{tok}` is not a finite number",
                        line_label(line)
                    ));
                    return None;
                }
            }
        }
        Some(out)
    }

    fn req_f64_list(&mut self, key: &str) -> Option<Vec<f64>> {
        if self.map.get(key).is_none() {
            self.used.insert(key.to_string());
            self.err(format!("missing required key `{key}`"));
            return None;
        }
        self.f64_list(key)
    }

    fn usize_list(&mut self, key: &str) -> Option<Vec<usize>> {
        let entry = self.touch(key)?;
        let (value, line) = (entry.value.clone(), entry.line);
        let mut out = Vec::new();
        for tok in list_tokens(&value) {
            match tok.parse::<usize>() {
                Ok(v) => out.push(v),
                Err(_) => {
                    self.err(format!(
                        "{}: key `{key}`: `{tok}` is not a non-negative integer",
                        line_label(line)
                    ));
                    return None;
                }
            }
        }
        Some(out)
    }

    fn req_usize_list(&mut self, key: &str) -> Option<Vec<usize>> {
        if self.map.get(key).is_none() {
            self.used.insert(key.to_string());
            self.err(format!("missing required key `{key}`"));
            return None;
        }
        self.usize_list(key)
    }

    fn finish(mut self, kind_name: &str) -> Vec<String> {
        for (key, entry) in self.map {
            if !self.used.contains(key) {
                self.errors.push(format!(
                    "{}: unknown key `{key}` (not used by kind `{kind_name}`)",
                    line_label(entry.line)
                ));
            }
        }
        self.errors
    }
}

/// Default parameter boxes per family, used when `lower`/`upper` are not
/// given. Each satisfies the family's structural box constraints.
fn default_box(family: &str) -> Option<(Vec<f64>, Vec<f64>)> {
    match family {
        "mckean_ou" => Some((vec![-5.0, -5.0, 0.05], vec![-0.05, 5.0, 5.0])),
        "gen_linear" => Some((vec![-5.0, -5.0], vec![5.0, 5.0])),
        "double_layer" => Some((vec![0.5, 0.3, 0.5, 1.5], vec![2.0, 0.8, 2.0, 3.0])),
        "nonlinear_f" => Some((vec![0.05], vec![5.0])),
        _ => None,
    }
}

fn broadcast(list: Vec<f64>, d: usize, key: &str, errors: &mut Vec<String>) -> Vec<f64> {
    if list.len() == d {
        list
    } else if list.len() == 1 {
        vec![list[0]; d]
    } else {
        errors.push(format!("key `{key}`: expected 1 or {d} values, got {}", list.len()));
        vec![0.0; d]
    }
}

/// Parse and fully validate a config text. See the module docs for the
/// format. On failure, every problem found is listed in one
/// [`Error::Config`].
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    parse_config_with_overrides(text, &[])
}

/// [`parse_config`] with command-line overrides applied before
/// validation and canonicalization (so the manifest hash reflects the
/// effective configuration).
pub fn parse_config_with_overrides(
    text: &str,
    overrides: &[(&str, String)],
) -> Result<ExperimentConfig> {
    let (mut map, mut early_errors) = parse_raw(text);
    for (key, value) in overrides {
        map.insert(key.to_string(), RawEntry { value: value.clone(), line: 0 });
    }

    // Canonical form: sorted keys, normalized spacing, `out` removed.
    let mut canonical_text = String::new();
    for (key, entry) in &map {
        if key == "out" {
            continue;
        }
        let _ = writeln!(canonical_text, "{key} = {value}", value = entry.value);
    }
    let digest = Sha256::digest(canonical_text.as_bytes());
    let mut config_hash = String::with_capacity(64);
    for byte in digest {
        let _ = write!(config_hash, "{byte:02x}");
    }

    let kind = match map.get("kind") {
        None => {
            early_errors.push("missing required key `kind`".to_string());
            None
        }
        Some(entry) => match ExperimentKind::from_name(&entry.value) {
            Some(k) => Some(k),
            None => {
                early_errors.push(format!(
                    "{}: unknown kind `{}` (known: {})",
                    line_label(entry.line),
                    entry.value,
                    ExperimentKind::all().map(|k| k.name()).join(", ")
                ));
                None
            }
        },
    };
    let Some(kind) = kind else {
        return Err(Error::Config(early_errors));
    };

    let mut ctx = Ctx::new(&map, early_errors);
    ctx.touch("kind");

    // --- model spec -------------------------------------------------
    let family = ctx.req_str("model").unwrap_or_default();
    let d = ctx.opt_usize("d", 1);
    let (def_lower, def_upper) = default_box(&family).unwrap_or((vec![], vec![]));
    let lower = ctx.f64_list("lower").unwrap_or(def_lower);
    let upper = ctx.f64_list("upper").unwrap_or(def_upper);
    let mut model = ModelSpec::new(&family, lower, upper);
    model.d = d;
    match family.as_str() {
        "gen_linear" => {
            model.kernel_f = Some(ctx.opt_str("kernel_f").unwrap_or_else(|| "identity".into()));
            model.kernel_g =
                Some(ctx.opt_str("kernel_g").unwrap_or_else(|| "gaussian_bump".into()));
        }
        "nonlinear_f" => {
            model.kernel_g =
                Some(ctx.opt_str("kernel_g").unwrap_or_else(|| "gaussian_bump".into()));
            model.link = Some(ctx.opt_str("link").unwrap_or_else(|| "tanh".into()));
        }
        _ => {}
    }
    let built = match build_model(&model) {
        Ok(m) => Some(m),
        Err(e) => {
            if !family.is_empty() {
                ctx.err(format!("model: {e}"));
            }
            None
        }
    };

    // --- diffusion ----------------------------------------------------
    let needs_sigma = kind != ExperimentKind::Identifiability;
    let sigma = if needs_sigma { ctx.opt_f64("sigma", 1.0) } else { 1.0 };
    if needs_sigma && sigma <= 0.0 {
        ctx.err("key `sigma` must be strictly positive".to_string());
    }

    // --- theta ----------------------------------------------------------
    let needs_theta = kind != ExperimentKind::Nondegeneracy;
    let theta = if needs_theta { ctx.req_f64_list("theta").unwrap_or_default() } else { vec![] };
    if needs_theta {
        if kind == ExperimentKind::Identifiability {
            // The Fourier check is closed-form and box-free; only the
            // structural scale constraints apply.
            if let Err(e) = crate::diagnostics::double_layer_fourier_scalar(&theta, d.max(1), 0.0)
            {
                ctx.err(format!("key `theta`: {e}"));
            }
        } else if let Some(m) = &built {
            if theta.len() != m.param_dim() {
                ctx.err(format!(
                    "key `theta`: expected {} values for `{family}`, got {}",
                    m.param_dim(),
                    theta.len()
                ));
            } else if let Err(violations) = validate_theta(m.as_ref(), &theta) {
                for v in violations {
                    ctx.err(format!("key `theta`: {v}"));
                }
            }
        }
    }

    // --- initial law ------------------------------------------------
    let needs_mu0 = kind != ExperimentKind::Identifiability;
    let mu0 = if needs_mu0 {
        let mu0_kind = ctx.opt_str("mu0").unwrap_or_else(|| "gaussian".into());
        match mu0_kind.as_str() {
            "gaussian" => {
                let mean = ctx.f64_list("mu0_mean").unwrap_or_else(|| vec![0.0]);
                let var = ctx.f64_list("mu0_var").unwrap_or_else(|| vec![0.5]);
                let mean = broadcast(mean, d, "mu0_mean", &mut ctx.errors);
                let var = broadcast(var, d, "mu0_var", &mut ctx.errors);
                if var.iter().any(|&v| v < 0.0) {
                    ctx.err("key `mu0_var`: variances must be non-negative".to_string());
                }
                InitialLaw::Gaussian { mean, var }
            }
            "point" => {
                let value = ctx.req_f64_list("mu0_value").unwrap_or_else(|| vec![0.0]);
                InitialLaw::Point { value: broadcast(value, d, "mu0_value", &mut ctx.errors) }
            }
            "uniform" => {
                let lo = ctx.req_f64_list("mu0_lower").unwrap_or_else(|| vec![0.0]);
                let hi = ctx.req_f64_list("mu0_upper").unwrap_or_else(|| vec![1.0]);
                let lo = broadcast(lo, d, "mu0_lower", &mut ctx.errors);
                let hi = broadcast(hi, d, "mu0_upper", &mut ctx.errors);
                if lo.iter().zip(&hi).any(|(a, b)| a > b) {
                    ctx.err("key `mu0_lower` must not exceed `mu0_upper`".to_string());
                }
                InitialLaw::Uniform { lower: lo, upper: hi }
            }
            other => {
                ctx.err(format!(
                    "key `mu0`: unknown initial law `{other}` (known: point, gaussian, uniform)"
                ));
                InitialLaw::gaussian(0.0, 0.5)
            }
        }
    } else {
        InitialLaw::gaussian(0.0, 0.5)
    };

    // --- kind-specific keys -------------------------------------------
    let needs_grid = !matches!(kind, ExperimentKind::Nondegeneracy | ExperimentKind::Identifiability);
    let (mut t_horizon, mut m_steps) = (0.0, 0);
    if needs_grid {
        if let Some(t) = ctx.req_f64("t") {
            if t > 0.0 {
                t_horizon = t;
            } else {
                ctx.err("key `t`: horizon must be strictly positive".to_string());
            }
        }
        if let Some(m) = ctx.req_usize("m") {
            if m >= 1 {
                m_steps = m;
            } else {
                ctx.err("key `m`: need at least one time step".to_string());
            }
        }
    }

    let needs_n = matches!(
        kind,
        ExperimentKind::Simulate
            | ExperimentKind::Estimate
            | ExperimentKind::Fisher
            | ExperimentKind::Lan
            | ExperimentKind::Normality
            | ExperimentKind::Risk
            | ExperimentKind::KlProxy
    );
    let n_values = if needs_n {
        let values = ctx.req_usize_list("n").unwrap_or_default();
        if values.iter().any(|&v| v == 0) {
            ctx.err("key `n`: particle counts must be at least 1".to_string());
        }
        values
    } else {
        vec![]
    };

    let needs_r = matches!(
        kind,
        ExperimentKind::Lan
            | ExperimentKind::Normality
            | ExperimentKind::Risk
            | ExperimentKind::ChaosRate
            | ExperimentKind::KlProxy
    );
    let r = if needs_r {
        let r = ctx.req_usize("r").unwrap_or(0);
        let min_r = if kind == ExperimentKind::ChaosRate { 1 } else { 2 };
        if r < min_r && r > 0 {
            ctx.err(format!("key `r`: kind `{}` needs at least {min_r} replications", kind.name()));
        } else if r == 0 && ctx.map.contains_key("r") {
            ctx.err("key `r`: need at least one replication".to_string());
        }
        r
    } else {
        0
    };

    let needs_seed = kind != ExperimentKind::Identifiability;
    let seed = if needs_seed { ctx.req_u64("seed").unwrap_or(0) } else { 0 };

    let u = if kind == ExperimentKind::Lan {
        let u = ctx.req_f64_list("u");
        if let (Some(u), Some(m)) = (&u, &built) {
            if u.len() != m.param_dim() {
                ctx.err(format!(
                    "key `u`: expected {} values for `{family}`, got {}",
                    m.param_dim(),
                    u.len()
                ));
            }
        }
        u
    } else {
        None
    };

    let method = if matches!(kind, ExperimentKind::Estimate | ExperimentKind::Normality) {
        let name = ctx.opt_str("method").unwrap_or_else(|| "auto".into());
        match name.as_str() {
            "auto" => MethodChoice::Auto,
            "linear" => {
                if let Some(m) = &built {
                    if !m.linear_in_theta() {
                        ctx.err(format!(
                            "key `method`: `linear` needs a drift linear in theta; `{family}` is not"
                        ));
                    }
                }
                MethodChoice::Linear
            }
            "numeric" => MethodChoice::Numeric,
            other => {
                ctx.err(format!(
                    "key `method`: unknown method `{other}` (known: auto, linear, numeric)"
                ));
                MethodChoice::Auto
            }
        }
    } else {
        MethodChoice::Auto
    };

    let loss = if kind == ExperimentKind::Risk {
        let name = ctx.opt_str("loss").unwrap_or_else(|| "squared_norm".into());
        if let Err(e) = crate::diagnostics::losses::loss_by_name(&name) {
            ctx.err(format!("key `loss`: {e}"));
        }
        name
    } else {
        String::new()
    };

    let levels = if kind == ExperimentKind::ChaosRate {
        let levels = ctx.req_usize_list("levels").unwrap_or_default();
        if !levels.is_empty()
            && (levels.len() < 3
                || levels[0] == 0
                || levels.windows(2).any(|w| w[0] >= w[1]))
        {
            ctx.err(
                "key `levels`: need at least 3 strictly increasing positive particle counts"
                    .to_string(),
            );
        }
        levels
    } else {
        vec![]
    };

    let reference = if kind == ExperimentKind::ChaosRate {
        let name = ctx.opt_str("reference").unwrap_or_else(|| "auto".into());
        match name.as_str() {
            "auto" => ReferenceChoice::Auto,
            "gaussian" => ReferenceChoice::Gaussian,
            "cloud" => ReferenceChoice::Cloud,
            other => {
                ctx.err(format!(
                    "key `reference`: unknown reference `{other}` (known: auto, gaussian, cloud)"
                ));
                ReferenceChoice::Auto
            }
        }
    } else {
        ReferenceChoice::Auto
    };

    let n_ref = if matches!(kind, ExperimentKind::ChaosRate | ExperimentKind::KlProxy) {
        let v = ctx.parse_scalar::<usize>("n_ref", "non-negative integer").map(|(v, _)| v);
        if v == Some(0) {
            ctx.err("key `n_ref`: reference cloud needs at least 1 particle".to_string());
        }
        v
    } else {
        None
    };

    let (mu0_atoms, mu0_n) = if kind == ExperimentKind::Nondegeneracy {
        let atoms = ctx.f64_list("mu0_atoms");
        if let Some(a) = &atoms {
            if a.is_empty() || a.len() % d != 0 {
                ctx.err(format!(
                    "key `mu0_atoms`: length {} is not a positive multiple of d = {d}",
                    a.len()
                ));
            }
        }
        (atoms, ctx.opt_usize("mu0_n", 200))
    } else {
        (None, 0)
    };
    if kind == ExperimentKind::Nondegeneracy && mu0_atoms.is_none() && mu0_n == 0 {
        ctx.err("key `mu0_n`: need at least one sampled atom".to_string());
    }

    let (n_pairs, n_directions, n_x) = if kind == ExperimentKind::Nondegeneracy {
        let np = ctx.opt_usize("n_pairs", 32);
        let nd = ctx.opt_usize("n_directions", 64);
        let nx = ctx.opt_usize("n_x", 101);
        if nd == 0 || nx < 2 {
            ctx.err("keys `n_directions` >= 1 and `n_x` >= 2 required".to_string());
        }
        (np, nd, nx)
    } else {
        (0, 0, 0)
    };

    let (theta_prime, xi_max, xi_points) = if kind == ExperimentKind::Identifiability {
        if family != "double_layer" && !family.is_empty() {
            ctx.err(format!(
                "kind `identifiability` requires model `double_layer`, got `{family}`"
            ));
        }
        let tp = ctx.req_f64_list("theta_prime");
        if let Some(tp) = &tp {
            if let Err(e) = crate::diagnostics::double_layer_fourier_scalar(tp, d.max(1), 0.0) {
                ctx.err(format!("key `theta_prime`: {e}"));
            }
        }
        let xi_max = ctx.opt_f64("xi_max", 10.0);
        let xi_points = ctx.opt_usize("xi_points", 201);
        if xi_max <= 0.0 {
            ctx.err("key `xi_max` must be strictly positive".to_string());
        }
        if xi_points < 2 {
            ctx.err("key `xi_points` must be at least 2".to_string());
        }
        (tp, xi_max, xi_points)
    } else {
        (None, 0.0, 0)
    };

    let out = ctx.opt_str("out");

    let errors = ctx.finish(kind.name());
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }

    Ok(ExperimentConfig {
        kind,
        model,
        sigma,
        theta,
        theta_prime,
        u,
        loss,
        levels,
        reference,
        method,
        n_values,
        t_horizon,
        m: m_steps,
        r,
        n_ref,
        seed,
        mu0,
        mu0_atoms,
        mu0_n,
        n_pairs,
        n_directions,
        n_x,
        xi_max,
        xi_points,
        out,
        canonical_text,
        config_hash,
    })
}
