//! Discrete, bounded-below spectra for the energy observable and the
//! time-generating observable.
//!
//! A [`Spectrum`] is a strictly increasing list of eigenvalues with integer
//! degeneracies. Spectra that stand in for an unbounded ladder carry a
//! [`TailRecord`] describing the Boltzmann weight that truncation discarded.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sum::compensated_sum;

/// Upper bound on the number of levels any constructor will allocate.
pub const MAX_LEVELS: usize = 1 << 26;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectrumError {
    #[error("spectrum must contain at least one level")]
    Empty,
    #[error("non-finite spectrum value {0}")]
    NonFinite(f64),
    #[error("degeneracy list has {got} entries but {expected} values were given")]
    DegeneracyLengthMismatch { expected: usize, got: usize },
    #[error("degeneracy must be at least 1 (level {index})")]
    ZeroDegeneracy { index: usize },
    #[error("harmonic parameter `{name}` must be finite and strictly positive, got {value}")]
    InvalidHarmonicParam { name: &'static str, value: f64 },
    #[error("level t_{n} of the harmonic ladder overflows")]
    Overflow { n: u64 },
    #[error("requested {0} levels, more than the supported maximum")]
    TooManyLevels(u64),
    #[error("rate must be finite and strictly positive, got {0}")]
    InvalidRate(f64),
    #[error("tail epsilon must lie in (0, 1), got {0}")]
    InvalidEpsilon(f64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("reading spectrum file: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectrumKind {
    Energy,
    Time,
}

impl fmt::Display for SpectrumKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpectrumKind::Energy => f.write_str("energy"),
            SpectrumKind::Time => f.write_str("time"),
        }
    }
}

impl FromStr for SpectrumKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "energy" => Ok(SpectrumKind::Energy),
            "time" => Ok(SpectrumKind::Time),
            other => Err(format!("unknown spectrum kind `{other}` (expected energy|time)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub value: f64,
    pub degeneracy: u64,
}

/// Boltzmann weight discarded when an unbounded ladder was cut to a finite
/// prefix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailRecord {
    /// Rate at which the tail bound was established.
    pub rate: f64,
    pub epsilon: f64,
    /// `ln Σ g·e^{-rate·x}` over the discarded levels, at `rate`.
    pub log_dropped_weight: f64,
    /// Smallest rate for which the discarded tail mass stays below `epsilon`.
    pub min_rate: f64,
}

/// Sorted, strictly increasing list of eigenvalues with degeneracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    kind: SpectrumKind,
    levels: Vec<Level>,
    tail: Option<TailRecord>,
}

impl Spectrum {
    /// Builds a spectrum from unordered values. Equal values merge into one
    /// level whose degeneracy is the sum of the merged degeneracies.
    pub fn new(
        kind: SpectrumKind,
        values: &[f64],
        degeneracies: Option<&[u64]>,
    ) -> Result<Self, SpectrumError> {
        if values.is_empty() {
            return Err(SpectrumError::Empty);
        }
        if let Some(d) = degeneracies {
            if d.len() != values.len() {
                return Err(SpectrumError::DegeneracyLengthMismatch {
                    expected: values.len(),
                    got: d.len(),
                });
            }
        }
        let mut pairs = Vec::with_capacity(values.len());
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(SpectrumError::NonFinite(v));
            }
            let g = degeneracies.map_or(1, |d| d[i]);
            if g == 0 {
                return Err(SpectrumError::ZeroDegeneracy { index: i });
            }
            pairs.push(Level { value: v, degeneracy: g });
        }
        pairs.sort_by(|a, b| a.value.total_cmp(&b.value));

        let mut levels: Vec<Level> = Vec::with_capacity(pairs.len());
        for lvl in pairs {
            match levels.last_mut() {
                // -0.0 and 0.0 compare equal and merge
                Some(last) if last.value == lvl.value => last.degeneracy += lvl.degeneracy,
                _ => levels.push(lvl),
            }
        }
        Ok(Spectrum { kind, levels, tail: None })
    }

    pub fn kind(&self) -> SpectrumKind {
        self.kind
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    /// Always false; a spectrum has at least one level.
    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.levels.iter().map(|l| l.value)
    }

    pub fn degeneracies(&self) -> impl Iterator<Item = u64> + '_ {
        self.levels.iter().map(|l| l.degeneracy)
    }

    pub fn min_value(&self) -> f64 {
        self.levels[0].value
    }

    pub fn max_value(&self) -> f64 {
        self.levels[self.levels.len() - 1].value
    }

    pub fn tail(&self) -> Option<&TailRecord> {
        self.tail.as_ref()
    }

    pub fn is_truncated(&self) -> bool {
        self.tail.is_some()
    }

    pub fn has_unit_degeneracies(&self) -> bool {
        self.levels.iter().all(|l| l.degeneracy == 1)
    }

    /// Warning text for time spectra that extend below zero.
    pub fn negative_time_warning(&self) -> Option<String> {
        if self.kind == SpectrumKind::Time && self.min_value() < 0.0 {
            Some(format!(
                "time spectrum has negative values (minimum {}); decay instants are expected to be non-negative",
                self.min_value()
            ))
        } else {
            None
        }
    }

    /// Reads the line-oriented spectrum file format.
    pub fn from_file(path: &Path) -> Result<Self, SpectrumError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SpectrumError::Io(format!("{}: {e}", path.display())))?;
        text.parse()
    }

    /// Renders the spectrum in the file format accepted by [`FromStr`].
    pub fn to_file_string(&self) -> String {
        let mut out = format!("kind: {}\n", self.kind);
        for l in &self.levels {
            if l.degeneracy == 1 {
                out.push_str(&format!("{:?}\n", l.value));
            } else {
                out.push_str(&format!("{:?} {}\n", l.value, l.degeneracy));
            }
        }
        out
    }

    fn with_tail(mut self, tail: Option<TailRecord>) -> Self {
        self.tail = tail;
        self
    }
}

impl FromStr for Spectrum {
    type Err = SpectrumError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut kind = None;
        let mut values = Vec::new();
        let mut degs = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| SpectrumError::Parse { line: line_no, message };
            if kind.is_none() {
                let rest = line
                    .strip_prefix("kind:")
                    .ok_or_else(|| parse_err("expected header `kind: energy|time`".into()))?;
                kind = Some(rest.parse::<SpectrumKind>().map_err(parse_err)?);
                continue;
            }
            let mut fields = line.split_whitespace();
            let value_tok = fields.next().expect("non-empty line has a token");
            let value: f64 = value_tok
                .parse()
                .map_err(|_| parse_err(format!("invalid value `{value_tok}`")))?;
            let g = match fields.next() {
                Some(tok) => tok
                    .parse::<u64>()
                    .map_err(|_| parse_err(format!("invalid degeneracy `{tok}`")))?,
                None => 1,
            };
            if let Some(extra) = fields.next() {
                return Err(parse_err(format!("unexpected trailing field `{extra}`")));
            }
            values.push(value);
            degs.push(g);
        }
        let kind = kind.ok_or(SpectrumError::Parse {
            line: 0,
            message: "missing `kind:` header".into(),
        })?;
        Spectrum::new(kind, &values, Some(&degs))
    }
}

/// Physical constants of the oscillator-type time generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarmonicParams {
    hbar: f64,
    mass: f64,
    omega: f64,
    c: f64,
    d: f64,
}

impl HarmonicParams {
    pub fn new(hbar: f64, mass: f64, omega: f64, c: f64) -> Result<Self, SpectrumError> {
        for (name, value) in [("hbar", hbar), ("mass", mass), ("omega", omega), ("c", c)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(SpectrumError::InvalidHarmonicParam { name, value });
            }
        }
        let d = hbar * hbar * omega / (mass * mass * c.powi(4));
        if !(d.is_finite() && d > 0.0) {
            return Err(SpectrumError::InvalidHarmonicParam { name: "d", value: d });
        }
        Ok(HarmonicParams { hbar, mass, omega, c, d })
    }

    /// Unit system with ħ = m = c = 1, where the time quantum equals ω.
    pub fn with_quantum(d: f64) -> Result<Self, SpectrumError> {
        Self::new(1.0, 1.0, d, 1.0)
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    /// Time quantum ħ²ω/(m²c⁴).
    pub fn d(&self) -> f64 {
        self.d
    }
}

fn harmonic_level(d: f64, n: u64) -> Result<f64, SpectrumError> {
    let t = d * (n as f64 + 0.5);
    if t.is_finite() {
        Ok(t)
    } else {
        Err(SpectrumError::Overflow { n })
    }
}

/// Levels `t_n = d·(n + ½)` for `n = 0..=n_max`.
pub fn harmonic_time_spectrum(params: &HarmonicParams, n_max: u64) -> Result<Spectrum, SpectrumError> {
    if n_max >= MAX_LEVELS as u64 {
        return Err(SpectrumError::TooManyLevels(n_max.saturating_add(1)));
    }
    harmonic_level(params.d(), n_max)?;
    let levels = (0..=n_max)
        .map(|n| Level { value: params.d() * (n as f64 + 0.5), degeneracy: 1 })
        .collect();
    Ok(Spectrum { kind: SpectrumKind::Time, levels, tail: None })
}

/// Harmonic ladder cut so that the discarded Boltzmann mass at `rate` is
/// below `epsilon`. The tail is geometric, so the cut is computed in closed
/// form instead of by summation.
pub fn harmonic_time_spectrum_for_tail(
    params: &HarmonicParams,
    rate: f64,
    epsilon: f64,
) -> Result<Spectrum, SpectrumError> {
    check_rate_epsilon(rate, epsilon)?;
    let d = params.d();
    let step = rate * d;
    // tail mass beyond the first m levels is e^{-m·rate·d}
    let needed = (-epsilon.ln() / step).floor() + 1.0;
    if !(needed < MAX_LEVELS as f64) {
        return Err(SpectrumError::TooManyLevels(needed.min(u64::MAX as f64) as u64));
    }
    let kept = (needed as u64).max(2);
    let spectrum = harmonic_time_spectrum(params, kept - 1)?;
    let q_ln = -step;
    // ln Σ_{n ≥ kept} e^{-rate·d(n+½)} = -rate·d(kept+½) - ln(1 - e^{-rate·d})
    let log_dropped = q_ln * (kept as f64 + 0.5) - (-(q_ln.exp_m1())).ln();
    let min_rate = -epsilon.ln() / (kept as f64 * d);
    Ok(spectrum.with_tail(Some(TailRecord {
        rate,
        epsilon,
        log_dropped_weight: log_dropped,
        min_rate: min_rate.min(rate),
    })))
}

fn check_rate_epsilon(rate: f64, epsilon: f64) -> Result<(), SpectrumError> {
    if !(rate.is_finite() && rate > 0.0) {
        return Err(SpectrumError::InvalidRate(rate));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(SpectrumError::InvalidEpsilon(epsilon));
    }
    Ok(())
}

/// Shortest prefix of `spectrum` whose discarded Boltzmann mass at `rate`
/// is below `epsilon`, never cutting below two levels.
///
/// The mass is normalized over the full spectrum, including any tail that a
/// previous truncation at the same rate already discarded, so repeating the
/// call with the same `(rate, epsilon)` is a no-op.
pub fn truncate_by_tail_mass(
    spectrum: &Spectrum,
    rate: f64,
    epsilon: f64,
) -> Result<Spectrum, SpectrumError> {
    check_rate_epsilon(rate, epsilon)?;
    let n = spectrum.len();
    let x0 = spectrum.min_value();
    let log_w: Vec<f64> = spectrum
        .levels
        .iter()
        .map(|l| (l.degeneracy as f64).ln() - rate * (l.value - x0))
        .collect();
    let prior_dropped = spectrum
        .tail
        .filter(|t| t.rate == rate)
        .map(|t| t.log_dropped_weight + rate * x0);

    let shift = log_w
        .iter()
        .copied()
        .chain(prior_dropped)
        .fold(f64::NEG_INFINITY, f64::max);
    let dropped_lin = prior_dropped.map_or(0.0, |ld| (ld - shift).exp());

    // suffix[k] = Σ_{j ≥ k} w_j (shifted), suffix[n] = 0
    let mut suffix = vec![0.0; n + 1];
    for k in (0..n).rev() {
        suffix[k] = compensated_sum([suffix[k + 1], (log_w[k] - shift).exp()]);
    }
    let total = compensated_sum([suffix[0], dropped_lin]);

    let keep = (1..=n)
        .find(|&k| (suffix[k] + dropped_lin) / total < epsilon)
        .unwrap_or(n)
        .max(n.min(2));

    if keep == n && prior_dropped.is_none() {
        // nothing dropped now or before at this rate
        return Ok(spectrum.clone());
    }
    let tail_lin = compensated_sum([suffix[keep], dropped_lin]);
    let log_dropped_weight = if tail_lin > 0.0 {
        tail_lin.ln() + shift - rate * x0
    } else {
        f64::NEG_INFINITY
    };
    // normalized tail mass only shrinks as the rate grows
    Ok(Spectrum {
        kind: spectrum.kind,
        levels: spectrum.levels[..keep].to_vec(),
        tail: Some(TailRecord { rate, epsilon, log_dropped_weight, min_rate: rate }),
    })
}
