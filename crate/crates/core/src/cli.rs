//! Batch front end: `tempens ensemble|solve|simulate|verify`.
//!
//! Every command reads a [`RunConfig`] (a TOML file, overridable from the
//! command line), writes a JSON report with schema `tempens/1` into the
//! output directory, and maps failures to stable exit codes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::decay_sim::{
    compare_survival, estimate_lambda, goodness_of_fit, sample_decay_times_with, DecayError, ShardPlan,
    DEFAULT_SHARD_SIZE, MIN_EXPECTED_PER_BIN,
};
use crate::ensemble::{boltzmann_weights, persistence, EnsembleError, GibbsWeights};
use crate::maxent::{
    attainable_interval, finite_difference_rate_check, harmonic_mean_closed_form, maxent_negative_control,
    maxent_verify, richardson_order, solve_rate_for_mean, MaxentError, DEFAULT_MAX_ITER,
};
use crate::operator_algebra::{
    assemble_canonical_state, commutator, conjugate_by_generated_unitary, generator_operator, max_norm,
    Generator, OperatorError, TensorLayout,
};
use crate::spectra::{
    harmonic_time_spectrum, harmonic_time_spectrum_for_tail, HarmonicParams, Spectrum, SpectrumError,
    SpectrumKind,
};

pub const SCHEMA: &str = "tempens/1";
pub const DEFAULT_TAIL_EPSILON: f64 = 1e-16;
pub const DEFAULT_TOL: f64 = 1e-10;
/// Largest spectrum the operator checks of `verify` accept.
pub const VERIFY_MAX_LEVELS: usize = 64;

const COMMUTATOR_TOL: f64 = 1e-13;
const CONJUGATION_TOL: f64 = 1e-10;
const DIAGONAL_TOL: f64 = 1e-12;
const FD_RATIO_TOL: f64 = 1e-5;
const FD_RELATIVE_STEP: f64 = 1e-4;
/// Observed order of a central difference is `2 + O(h²)`, either side of 2.
const RICHARDSON_MIN_ORDER: f64 = 1.95;
const MAXENT_TRIALS: u32 = 1000;
const MAXENT_STEP: f64 = 0.05;
const MAXENT_GAIN_TOL: f64 = 1e-12;
const CONJUGATION_TAUS: usize = 20;
const IDENTITY_TOL: f64 = 1e-12;
const CLOSED_FORM_TOL: f64 = 1e-10;
const SIGMA_BAND: f64 = 3.0;

/// Exit codes of the `tempens` binary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ExitStatus {
    Success = 0,
    ConfigError = 2,
    NumericError = 3,
    Unattainable = 4,
    VerificationFailed = 5,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("unattainable target: {0}")]
    Unattainable(String),
}

impl CliError {
    pub fn status(&self) -> ExitStatus {
        match self {
            CliError::Config(_) => ExitStatus::ConfigError,
            CliError::Numeric(_) => ExitStatus::NumericError,
            CliError::Unattainable(_) => ExitStatus::Unattainable,
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl From<SpectrumError> for CliError {
    fn from(e: SpectrumError) -> Self {
        match e {
            SpectrumError::Overflow { .. } | SpectrumError::TooManyLevels(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<EnsembleError> for CliError {
    fn from(e: EnsembleError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<OperatorError> for CliError {
    fn from(e: OperatorError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<MaxentError> for CliError {
    fn from(e: MaxentError) -> Self {
        match e {
            MaxentError::Unattainable { .. } => CliError::Unattainable(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<DecayError> for CliError {
    fn from(e: DecayError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

/// Oscillator-type time generator. Either `d` alone, or all of `hbar`,
/// `mass`, `omega`, `c`. Without `n_max` the ladder is cut by tail mass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarmonicConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hbar: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mass: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_max: Option<u64>,
}

impl HarmonicConfig {
    pub fn params(&self) -> Result<HarmonicParams, CliError> {
        let physical = [self.hbar, self.mass, self.omega, self.c];
        match (self.d, physical) {
            (Some(d), [None, None, None, None]) => Ok(HarmonicParams::with_quantum(d)?),
            (None, [Some(hbar), Some(mass), Some(omega), Some(c)]) => Ok(HarmonicParams::new(hbar, mass, omega, c)?),
            (Some(_), _) => Err(config_err("harmonic: give either `d` or `hbar`, `mass`, `omega`, `c`, not both")),
            (None, _) => Err(config_err("harmonic: `hbar`, `mass`, `omega` and `c` must all be set")),
        }
    }
}

/// One run of any subcommand. Exactly one spectrum source must be set:
/// `spectrum_file`, `[harmonic]`, or inline `levels` (with optional
/// `degeneracies` and `kind`, default time).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spectrum_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub harmonic: Option<HarmonicConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degeneracies: Option<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<SpectrumKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_particles: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tail_epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub persistence_l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kb: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shard_size: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl RunConfig {
    /// Parses a TOML config. A relative `spectrum_file` is resolved against
    /// the directory containing the config.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        if let (Some(file), Some(dir)) = (&config.spectrum_file, path.parent()) {
            if file.is_relative() {
                config.spectrum_file = Some(dir.join(file));
            }
        }
        Ok(config)
    }

    pub fn tail_epsilon(&self) -> f64 {
        self.tail_epsilon.unwrap_or(DEFAULT_TAIL_EPSILON)
    }

    pub fn tol(&self) -> f64 {
        self.tol.unwrap_or(DEFAULT_TOL)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    fn shard_plan(&self) -> ShardPlan {
        ShardPlan { shard_size: self.shard_size.unwrap_or(DEFAULT_SHARD_SIZE) }
    }

    /// The config as echoed into reports: resolved defaults, without the
    /// fields that do not affect results.
    fn echo(&self) -> Value {
        let mut echo = self.clone();
        echo.output_dir = None;
        echo.workers = None;
        echo.tail_epsilon = Some(self.tail_epsilon());
        echo.tol = Some(self.tol());
        serde_json::to_value(echo).unwrap_or(Value::Null)
    }

    fn validate(&self, command: Command) -> Result<(), CliError> {
        let sources = [self.spectrum_file.is_some(), self.harmonic.is_some(), self.levels.is_some()];
        match sources.iter().filter(|&&s| s).count() {
            0 => return Err(config_err("no spectrum: set `spectrum_file`, `[harmonic]` or `levels`")),
            1 => {}
            _ => return Err(config_err("set only one of `spectrum_file`, `[harmonic]`, `levels`")),
        }
        if self.levels.is_none() && (self.degeneracies.is_some() || self.kind.is_some()) {
            return Err(config_err("`degeneracies` and `kind` apply only to inline `levels`"));
        }
        let eps = self.tail_epsilon();
        if !(eps > 0.0 && eps < 1.0) {
            return Err(config_err(format!("tail_epsilon must lie in (0, 1), got {eps}")));
        }
        let tol = self.tol();
        if !(tol.is_finite() && tol > 0.0) {
            return Err(config_err(format!("tol must be finite and positive, got {tol}")));
        }
        for (name, value) in [("rate", self.rate), ("persistence_l", self.persistence_l), ("kb", self.kb)] {
            if let Some(v) = value {
                if !(v.is_finite() && v > 0.0) {
                    return Err(config_err(format!("{name} must be finite and positive, got {v}")));
                }
            }
        }
        if let Some(m) = self.target_mean {
            if !m.is_finite() {
                return Err(config_err(format!("target_mean must be finite, got {m}")));
            }
        }
        if self.n_particles == Some(0) {
            return Err(config_err("n_particles must be at least 1"));
        }
        if self.workers == Some(0) {
            return Err(config_err("workers must be at least 1"));
        }
        if self.shard_size == Some(0) {
            return Err(config_err("shard_size must be at least 1"));
        }
        match command {
            Command::Solve => {
                if self.rate.is_some() {
                    return Err(config_err("solve takes `target_mean`, not `rate`"));
                }
                if self.target_mean.is_none() {
                    return Err(config_err("solve needs `target_mean`"));
                }
            }
            Command::Ensemble | Command::Simulate | Command::Verify => {
                if self.target_mean.is_some() {
                    return Err(config_err(format!("{command} takes `rate`, not `target_mean`")));
                }
                if self.rate.is_none() {
                    return Err(config_err(format!("{command} needs `rate`")));
                }
            }
        }
        if command == Command::Simulate {
            if self.n_particles.is_none() {
                return Err(config_err("simulate needs `n_particles`"));
            }
            if self.seed.is_none() {
                return Err(config_err("simulate needs `seed`"));
            }
        }
        Ok(())
    }

    /// Builds the spectrum. An uncapped harmonic ladder is cut by tail mass
    /// at `cut_rate`.
    fn spectrum(&self, cut_rate: f64) -> Result<Spectrum, CliError> {
        if let Some(path) = &self.spectrum_file {
            return Ok(Spectrum::from_file(path)?);
        }
        if let Some(h) = &self.harmonic {
            let params = h.params()?;
            return Ok(match h.n_max {
                Some(n) => harmonic_time_spectrum(&params, n)?,
                None => harmonic_time_spectrum_for_tail(&params, cut_rate, self.tail_epsilon())?,
            });
        }
        let levels = self.levels.as_deref().unwrap_or_default();
        let kind = self.kind.unwrap_or(SpectrumKind::Time);
        Ok(Spectrum::new(kind, levels, self.degeneracies.as_deref())?)
    }

    fn harmonic_d(&self) -> Result<Option<f64>, CliError> {
        self.harmonic.as_ref().map(|h| h.params().map(|p| p.d())).transpose()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Ensemble,
    Solve,
    Simulate,
    Verify,
}

impl std::fmt::Display for Command {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Command::Ensemble => "ensemble",
            Command::Solve => "solve",
            Command::Simulate => "simulate",
            Command::Verify => "verify",
        })
    }
}

/// One named check in a report. `bound` says whether `value` must stay at
/// or below `tolerance` ("max") or at or above it ("min").
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub bound: &'static str,
    pub pass: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, tolerance: f64) -> Self {
        Check { name: name.into(), value, tolerance, bound: "max", pass: value <= tolerance }
    }

    fn at_least(name: &str, value: f64, tolerance: f64) -> Self {
        Check { name: name.into(), value, tolerance, bound: "min", pass: value >= tolerance }
    }

    fn above(name: &str, value: f64, tolerance: f64) -> Self {
        Check { name: name.into(), value, tolerance, bound: "min_exclusive", pass: value > tolerance }
    }
}

/// What a finished command produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub status: ExitStatus,
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
    pub message: Option<String>,
}

struct Output {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Output {
    fn new(config: &RunConfig) -> Result<Self, CliError> {
        let dir = config.output_dir();
        fs::create_dir_all(&dir).map_err(|e| config_err(format!("output_dir {}: {e}", dir.display())))?;
        Ok(Output { dir, files: Vec::new() })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| config_err(format!("writing {}: {e}", path.display())))?;
        self.files.push(path);
        Ok(())
    }

    fn report(
        &mut self,
        name: &str,
        command: Command,
        config: &RunConfig,
        results: Value,
        checks: &[Check],
    ) -> Result<(), CliError> {
        let report = json!({
            "schema": SCHEMA,
            "command": command,
            "config_echo": config.echo(),
            "results": results,
            "checks": checks,
        });
        let mut text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Numeric(e.to_string()))?;
        text.push('\n');
        self.write(name, &text)
    }
}

/// Round-trip exact float formatting for CSV.
fn csv_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn spectrum_warnings(spectrum: &Spectrum) -> Vec<String> {
    spectrum.negative_time_warning().into_iter().collect()
}

fn conversions(config: &RunConfig, kind: SpectrumKind, rate: f64) -> Result<Value, CliError> {
    let mut out = serde_json::Map::new();
    if let Some(l) = config.persistence_l {
        out.insert("persistence".into(), json!(persistence(rate, l)?));
    }
    if let (Some(kb), SpectrumKind::Energy) = (config.kb, kind) {
        // both readings of the exponent coefficient: β = k_B·T and β = 1/(k_B·T)
        out.insert(
            "temperature".into(),
            json!({ "kb": kb, "rate_as_kb_t": rate / kb, "rate_as_inverse_kb_t": 1.0 / (kb * rate) }),
        );
    }
    Ok(Value::Object(out))
}

fn entropy_identity_check(weights: &GibbsWeights) -> Check {
    let lhs = weights.entropy_trace();
    let rhs = -(weights.rate() * weights.mean() + weights.log_partition());
    let scale = 1.0 + (weights.rate() * weights.mean()).abs() + weights.log_partition().abs();
    Check::at_most("entropy_identity", (lhs - rhs).abs() / scale, IDENTITY_TOL)
}

fn normalization_check(weights: &GibbsWeights) -> Check {
    let total: f64 = weights.probs().iter().sum();
    Check::at_most("normalization", (total - 1.0).abs(), IDENTITY_TOL)
}

pub fn cmd_ensemble(config: &RunConfig) -> Result<RunSummary, CliError> {
    config.validate(Command::Ensemble)?;
    let rate = config.rate.unwrap_or_default();
    let spectrum = config.spectrum(rate)?;
    let warnings = spectrum_warnings(&spectrum);
    let weights = boltzmann_weights(&spectrum, rate)?;
    let results = json!({
        "levels": spectrum.len(),
        "truncated": spectrum.tail(),
        "rate": rate,
        "log_partition": weights.log_partition(),
        "mean": weights.mean(),
        "variance": weights.variance(),
        "entropy_trace": weights.entropy_trace(),
        "conversions": conversions(config, spectrum.kind(), rate)?,
    });
    let checks = [normalization_check(&weights), entropy_identity_check(&weights)];

    let mut csv = String::from("value,degeneracy,prob\n");
    for ((x, g), p) in spectrum.values().zip(spectrum.degeneracies()).zip(weights.probs()) {
        let _ = writeln!(csv, "{},{g},{}", csv_float(x), csv_float(*p));
    }
    let mut out = Output::new(config)?;
    out.report("ensemble.json", Command::Ensemble, config, results, &checks)?;
    out.write("weights.csv", &csv)?;
    Ok(RunSummary { status: ExitStatus::Success, files: out.files, warnings, message: None })
}

/// Rate at which a harmonic ladder has mean `target`, from inverting
/// `(d/2)·coth(λd/2)`.
fn harmonic_rate_for_mean(d: f64, target: f64) -> Option<f64> {
    let r = 2.0 * target / d;
    (r > 1.0).then(|| ((r + 1.0) / (r - 1.0)).ln() / d)
}

pub fn cmd_solve(config: &RunConfig) -> Result<RunSummary, CliError> {
    config.validate(Command::Solve)?;
    let target = config.target_mean.unwrap_or_default();
    let harmonic_d = config.harmonic_d()?;
    let closed_form_rate = match harmonic_d {
        Some(d) => Some(harmonic_rate_for_mean(d, target).ok_or_else(|| {
            CliError::Unattainable(format!(
                "target mean {target} is outside the attainable interval ({}, inf)",
                0.5 * d
            ))
        })?),
        None => None,
    };
    // an uncapped ladder is cut well below the expected root
    let spectrum = config.spectrum(closed_form_rate.map_or(1.0, |r| 0.5 * r))?;
    let warnings = spectrum_warnings(&spectrum);
    let solve = solve_rate_for_mean(&spectrum, target, config.tol(), DEFAULT_MAX_ITER)?;
    let (lo, hi) = attainable_interval(&spectrum)?;
    let mut checks = vec![
        Check::at_most("iterations", f64::from(solve.iterations), f64::from(DEFAULT_MAX_ITER)),
        Check::at_most("mean_residual", solve.residual.abs(), config.tol()),
    ];
    let mut results = json!({
        "levels": spectrum.len(),
        "truncated": spectrum.tail(),
        "target_mean": target,
        "rate": solve.rate,
        "iterations": solve.iterations,
        "residual": solve.residual,
        "bracket": [solve.bracket.0, solve.bracket.1],
        "attainable_interval": [lo, hi],
        "conversions": conversions(config, spectrum.kind(), solve.rate)?,
    });
    if let (Some(d), Some(cf)) = (harmonic_d, closed_form_rate) {
        let closed_mean = harmonic_mean_closed_form(d, solve.rate)?;
        results["closed_form"] = json!({ "d": d, "rate": cf, "mean_at_rate": closed_mean });
        if config.harmonic.as_ref().and_then(|h| h.n_max).is_none() {
            checks.push(Check::at_most("closed_form_rate", (solve.rate - cf).abs() / cf, CLOSED_FORM_TOL));
        }
    }
    let mut out = Output::new(config)?;
    out.report("solve.json", Command::Solve, config, results, &checks)?;
    Ok(RunSummary { status: ExitStatus::Success, files: out.files, warnings, message: None })
}

pub fn cmd_simulate(config: &RunConfig) -> Result<RunSummary, CliError> {
    config.validate(Command::Simulate)?;
    let rate = config.rate.unwrap_or_default();
    let n = config.n_particles.unwrap_or_default();
    let seed = config.seed.unwrap_or_default();
    // cut below the true rate so fitted rates near it stay admissible
    let spectrum = config.spectrum(0.5 * rate)?;
    if spectrum.kind() != SpectrumKind::Time {
        return Err(config_err("simulate needs a time spectrum"));
    }
    let warnings = spectrum_warnings(&spectrum);
    let weights = boltzmann_weights(&spectrum, rate)?;
    let sample = sample_decay_times_with(&weights, n, seed, config.shard_plan(), config.workers)?;
    let rows = compare_survival(&sample, &weights)?;

    let mut checks = Vec::new();
    let max_z = rows
        .iter()
        .filter(|r| r.decay_law >= MIN_EXPECTED_PER_BIN && r.stderr > 0.0)
        .map(|r| (r.empirical - r.decay_law).abs() / r.stderr)
        .fold(0.0, f64::max);
    checks.push(Check::at_most("survival_max_z", max_z, SIGMA_BAND));

    let mut message = None;
    let mut status = ExitStatus::Success;
    let fit = match estimate_lambda(&sample, config.tol()) {
        Ok(fit) => {
            checks.push(Check::at_most("lambda_hat_z", (fit.lambda_hat - rate).abs() / fit.stderr, SIGMA_BAND));
            let fitted = boltzmann_weights(&spectrum, fit.lambda_hat)?;
            let gof = match goodness_of_fit(&sample, &fitted, true) {
                Ok(g) => json!({ "chi2": g.chi2, "dof": g.dof, "p_value": g.p_value, "bins": g.bins.len() }),
                Err(e) => json!({ "status": "unavailable", "reason": e.to_string() }),
            };
            json!({
                "status": "ok",
                "lambda_hat": fit.lambda_hat,
                "stderr": fit.stderr,
                "log_likelihood": fit.log_likelihood,
                "iterations": fit.solve.iterations,
                "residual": fit.solve.residual,
                "goodness_of_fit": gof,
            })
        }
        Err(DecayError::DegenerateSample { mean, lo, hi }) => {
            let reason = DecayError::DegenerateSample { mean, lo, hi }.to_string();
            status = ExitStatus::NumericError;
            message = Some(reason.clone());
            json!({ "status": "degenerate", "sample_mean": mean, "reason": reason })
        }
        Err(e) => return Err(e.into()),
    };
    let true_gof = match goodness_of_fit(&sample, &weights, false) {
        Ok(g) => json!({ "chi2": g.chi2, "dof": g.dof, "p_value": g.p_value, "bins": g.bins.len() }),
        Err(e) => json!({ "status": "unavailable", "reason": e.to_string() }),
    };
    let results = json!({
        "levels": spectrum.len(),
        "truncated": spectrum.tail(),
        "rate": rate,
        "n_particles": n,
        "seed": seed,
        "shard_size": config.shard_plan().shard_size,
        "sample_mean": sample.mean_time(),
        "counts": sample.counts(),
        "fit": fit,
        "goodness_of_fit_at_rate": true_gof,
        "conversions": conversions(config, spectrum.kind(), rate)?,
    });

    let mut csv = String::from("t,theoretical_n,expected_n,empirical_n\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            csv_float(r.t),
            csv_float(r.decay_law),
            csv_float(r.model),
            csv_float(r.empirical)
        );
    }
    let mut out = Output::new(config)?;
    out.report("simulate.json", Command::Simulate, config, results, &checks)?;
    out.write("survival.csv", &csv)?;
    Ok(RunSummary { status, files: out.files, warnings, message })
}

pub fn cmd_verify(config: &RunConfig) -> Result<RunSummary, CliError> {
    config.validate(Command::Verify)?;
    let rate = config.rate.unwrap_or_default();
    let seed = config.seed.unwrap_or(0);
    let spectrum = config.spectrum(rate)?;
    if spectrum.len() > VERIFY_MAX_LEVELS {
        return Err(config_err(format!(
            "verify supports at most {VERIFY_MAX_LEVELS} levels, spectrum has {}",
            spectrum.len()
        )));
    }
    let warnings = spectrum_warnings(&spectrum);
    let weights = boltzmann_weights(&spectrum, rate)?;
    let mut checks = vec![normalization_check(&weights), entropy_identity_check(&weights)];
    let mut skipped = Vec::new();

    let mut taus = Vec::new();
    if spectrum.has_unit_degeneracies() {
        let rho = assemble_canonical_state(&spectrum, rate)?;
        let layout = TensorLayout::for_spectrum(&spectrum);
        let diag = rho.diagonal();
        let diag_err = weights
            .probs()
            .iter()
            .enumerate()
            .map(|(i, p)| (diag[layout.index(i, i)] - p).abs())
            .fold(0.0, f64::max);
        checks.push(Check::at_most("density_diagonal_vs_weights", diag_err, DIAGONAL_TOL));

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        taus = (0..CONJUGATION_TAUS).map(|_| rng.random_range(-10.0..10.0)).collect();
        for which in [Generator::SHat, Generator::THat] {
            let g = generator_operator(&spectrum, which, layout)?;
            checks.push(Check::at_most(
                &format!("commutator_norm_{which}"),
                max_norm(&commutator(&rho, &g)?),
                COMMUTATOR_TOL,
            ));
            let mut drift: f64 = 0.0;
            for &tau in &taus {
                let moved = conjugate_by_generated_unitary(&rho, &g, tau)?;
                drift = drift.max(max_norm(&(moved.entries() - rho.entries())));
            }
            checks.push(Check::at_most(&format!("conjugation_drift_{which}"), drift, CONJUGATION_TOL));
        }
    } else {
        skipped.push("operator checks need unit degeneracies");
    }

    let mut derivative = Value::Null;
    if spectrum.len() >= 2 {
        let h = FD_RELATIVE_STEP * rate;
        let fd = finite_difference_rate_check(&spectrum, rate, h)?;
        let rich = richardson_order(&spectrum, rate, h)?;
        checks.push(Check::at_most("fd_ratio_times_rate", (fd.fd_ratio * rate - 1.0).abs(), FD_RATIO_TOL));
        checks.push(Check::at_least("richardson_order", rich.observed_order, RICHARDSON_MIN_ORDER));
        derivative = json!({
            "step": fd.step,
            "fd_ratio": fd.fd_ratio,
            "analytic_oracle": fd.analytic_oracle,
            "abs_error": fd.abs_error,
            "rate_reading_gap": fd.rate_reading_gap,
            "richardson": rich,
        });
    } else {
        skipped.push("derivative checks need at least 2 levels");
    }

    let mut maxent = Value::Null;
    match (
        maxent_verify(&weights, MAXENT_TRIALS, MAXENT_STEP, seed),
        maxent_negative_control(&weights, MAXENT_TRIALS, MAXENT_STEP, seed),
    ) {
        (Ok(rep), Ok(control)) => {
            checks.push(Check::at_most("maxent_max_gain", rep.max_gain, MAXENT_GAIN_TOL));
            checks.push(Check::above("maxent_negative_control_gain", control.max_gain, 0.0));
            maxent = json!({ "projected": rep, "negative_control": control, "step": MAXENT_STEP });
        }
        (Err(MaxentError::TooFewLevels { .. }), _) | (_, Err(MaxentError::TooFewLevels { .. })) => {
            skipped.push("maxent checks need at least 3 populated levels");
        }
        (Err(e), _) | (_, Err(e)) => return Err(e.into()),
    }

    if let (Some(d), None) = (config.harmonic_d()?, config.harmonic.as_ref().and_then(|h| h.n_max)) {
        let closed = harmonic_mean_closed_form(d, rate)?;
        checks.push(Check::at_most(
            "harmonic_closed_form_mean",
            (weights.mean() - closed).abs() / closed,
            CLOSED_FORM_TOL,
        ));
    }

    let all_pass = checks.iter().all(|c| c.pass);
    let results = json!({
        "levels": spectrum.len(),
        "truncated": spectrum.tail(),
        "rate": rate,
        "conjugation_taus": taus,
        "derivative": derivative,
        "maxent": maxent,
        "skipped": skipped,
        "all_pass": all_pass,
    });
    let mut out = Output::new(config)?;
    out.report("verify.json", Command::Verify, config, results, &checks)?;
    let (status, message) = if all_pass {
        (ExitStatus::Success, None)
    } else {
        let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
        (ExitStatus::VerificationFailed, Some(format!("failed checks: {}", failed.join(", "))))
    };
    Ok(RunSummary { status, files: out.files, warnings, message })
}

pub fn execute(command: Command, config: &RunConfig) -> Result<RunSummary, CliError> {
    match command {
        Command::Ensemble => cmd_ensemble(config),
        Command::Solve => cmd_solve(config),
        Command::Simulate => cmd_simulate(config),
        Command::Verify => cmd_verify(config),
    }
}

#[derive(Debug, Parser)]
#[command(name = "tempens", version, about = "Canonical and temporal canonical ensemble toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Partition function, mean, variance and entropy trace at a rate.
    Ensemble(Overrides),
    /// Rate whose ensemble mean matches `target_mean`.
    Solve(Overrides),
    /// Monte Carlo decay sample, survival curve and rate fit.
    Simulate(Overrides),
    /// Operator, derivative and maximum-entropy checks.
    Verify(Overrides),
}

impl CliCommand {
    fn split(self) -> (Command, Overrides) {
        match self {
            CliCommand::Ensemble(o) => (Command::Ensemble, o),
            CliCommand::Solve(o) => (Command::Solve, o),
            CliCommand::Simulate(o) => (Command::Simulate, o),
            CliCommand::Verify(o) => (Command::Verify, o),
        }
    }
}

/// Per-field overrides applied on top of `--config`.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// TOML run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub spectrum_file: Option<PathBuf>,
    /// Harmonic time quantum (ħ = m = c = 1).
    #[arg(long)]
    pub d: Option<f64>,
    #[arg(long)]
    pub n_max: Option<u64>,
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub target_mean: Option<f64>,
    #[arg(long)]
    pub n_particles: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tail_epsilon: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub persistence_l: Option<f64>,
    /// Boltzmann constant for the temperature readings of an energy rate.
    #[arg(long)]
    pub kb: Option<f64>,
    #[arg(long)]
    pub shard_size: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
}

impl Overrides {
    pub fn resolve(self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(path) = self.spectrum_file {
            c.spectrum_file = Some(path);
            c.harmonic = None;
            c.levels = None;
        }
        if self.d.is_some() || self.n_max.is_some() {
            let h = c.harmonic.get_or_insert_with(HarmonicConfig::default);
            if let Some(d) = self.d {
                *h = HarmonicConfig { d: Some(d), n_max: h.n_max, ..HarmonicConfig::default() };
            }
            if self.n_max.is_some() {
                h.n_max = self.n_max;
            }
        }
        macro_rules! set {
            ($($field:ident),*) => { $( if self.$field.is_some() { c.$field = self.$field; } )* };
        }
        set!(rate, target_mean, n_particles, seed, tail_epsilon, tol, persistence_l, kb, shard_size, output_dir, workers);
        Ok(c)
    }
}

/// Parses `args`, runs the command and returns the process exit code.
/// Diagnostics go to standard error.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitStatus::ConfigError.code() } else { 0 };
        }
    };
    let (command, overrides) = cli.command.split();
    let result = overrides.resolve().and_then(|config| execute(command, &config));
    match result {
        Ok(summary) => {
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            if let Some(m) = &summary.message {
                eprintln!("tempens {command}: {m}");
            }
            summary.status.code()
        }
        Err(e) => {
            eprintln!("tempens {command}: {e}");
            e.status().code()
        }
    }
}
