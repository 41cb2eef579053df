//! Inversion of the monotone map `rate ↦ ⟨x⟩` and numerical checks of the
//! thermodynamic and maximum-entropy properties of the Gibbs family.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::{boltzmann_weights, entropy_trace_of, EnsembleError, GibbsWeights};
use crate::spectra::Spectrum;
use crate::sum::{compensated_sum, CompensatedSum};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: u32 = 200;
/// Lower end of the admissible rates for finite spectra.
pub const MIN_RATE: f64 = 1e-12;

/// Cap on the extra steps taken after the residual first meets the tolerance.
const POLISH_STEPS: u32 = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaxentError {
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error("need at least {needed} distinct levels, spectrum has {got}")]
    TooFewLevels { needed: usize, got: usize },
    #[error("target mean {target} is outside the attainable interval ({lo}, {hi})")]
    Unattainable { target: f64, lo: f64, hi: f64 },
    #[error("no convergence after {iterations} iterations (rate {rate}, residual {residual:e})")]
    MaxIterations { iterations: u32, rate: f64, residual: f64 },
    #[error("tolerance must be finite and positive, got {0}")]
    InvalidTolerance(f64),
    #[error("finite-difference step {h} is invalid at rate {rate}")]
    InvalidStep { rate: f64, h: f64 },
    #[error("entropy does not vary with the rate (single-level spectrum)")]
    ConstantEntropy,
    #[error("closed form out of range for d = {d}, lambda = {lambda}")]
    OutOfRange { d: f64, lambda: f64 },
}

/// `⟨x⟩` of the Gibbs distribution at `rate`.
pub fn mean_vs_rate(spectrum: &Spectrum, rate: f64) -> Result<f64, MaxentError> {
    Ok(boltzmann_weights(spectrum, rate)?.mean())
}

/// Smallest rate the solver will consider for this spectrum.
pub fn min_admissible_rate(spectrum: &Spectrum) -> f64 {
    spectrum.tail().map_or(MIN_RATE, |t| t.min_rate.max(MIN_RATE))
}

/// Open interval of means reachable with admissible rates:
/// `(x_min, ⟨x⟩ at the minimal rate)`.
pub fn attainable_interval(spectrum: &Spectrum) -> Result<(f64, f64), MaxentError> {
    Ok((spectrum.min_value(), mean_vs_rate(spectrum, min_admissible_rate(spectrum))?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSolveResult {
    pub rate: f64,
    pub iterations: u32,
    /// Target mean minus achieved mean.
    pub residual: f64,
    pub bracket: (f64, f64),
}

struct Eval {
    rate: f64,
    mean: f64,
    /// `mean - x_min`
    excess: f64,
    variance: f64,
}

fn evaluate(spectrum: &Spectrum, rate: f64) -> Result<Eval, MaxentError> {
    let w = boltzmann_weights(spectrum, rate)?;
    Ok(Eval { rate, mean: w.mean(), excess: w.mean_excess(), variance: w.variance() })
}

/// Finds the rate whose Gibbs mean equals `target_mean`.
///
/// The bracket is grown geometrically from `1/(x_max - x_min)`, then refined
/// by Newton steps on `ln(⟨x⟩ - x_min)`, using `d⟨x⟩/d(rate) = -variance`.
/// The log form stays well scaled when nearly all mass sits on the ground
/// level. A Newton step that leaves the bracket is replaced by a geometric
/// bisection. Once the residual is within `tol`, iteration continues until
/// the rate itself stops moving.
pub fn solve_rate_for_mean(
    spectrum: &Spectrum,
    target_mean: f64,
    tol: f64,
    max_iter: u32,
) -> Result<LambdaSolveResult, MaxentError> {
    if spectrum.len() < 2 {
        return Err(MaxentError::TooFewLevels { needed: 2, got: spectrum.len() });
    }
    if !(tol.is_finite() && tol > 0.0) {
        return Err(MaxentError::InvalidTolerance(tol));
    }
    let rate_min = min_admissible_rate(spectrum);
    let at_min = evaluate(spectrum, rate_min)?;
    let x_min = spectrum.min_value();
    if !(target_mean > x_min && target_mean < at_min.mean) {
        return Err(MaxentError::Unattainable { target: target_mean, lo: x_min, hi: at_min.mean });
    }

    let mut iterations = 0u32;
    let mut lo = rate_min;
    let mut hi = f64::INFINITY;
    let mut best = at_min;

    let mut probe = (1.0 / (spectrum.max_value() - x_min)).max(rate_min);
    while hi.is_infinite() {
        if !probe.is_finite() || iterations >= max_iter {
            return Err(MaxentError::MaxIterations {
                iterations,
                rate: best.rate,
                residual: target_mean - best.mean,
            });
        }
        iterations += 1;
        let e = evaluate(spectrum, probe)?;
        if e.mean > target_mean {
            lo = probe;
            probe *= 2.0;
        } else {
            hi = probe;
        }
        if (target_mean - e.mean).abs() <= (target_mean - best.mean).abs() {
            best = e;
        }
    }

    let mut rate = if best.rate > lo && best.rate < hi { best.rate } else { (lo * hi).sqrt() };
    let mut polish = 0u32;
    loop {
        if iterations >= max_iter {
            break;
        }
        iterations += 1;
        let e = evaluate(spectrum, rate)?;
        if e.mean > target_mean {
            lo = lo.max(e.rate);
        } else if e.mean < target_mean {
            hi = hi.min(e.rate);
        }
        if (target_mean - e.mean).abs() <= (target_mean - best.mean).abs() {
            best = e;
        }
        let residual = target_mean - best.mean;
        if residual == 0.0 {
            break;
        }
        // Newton on ln(mean - x_min) - ln(target - x_min)
        let log_gap = (best.excess / (target_mean - x_min)).ln();
        let newton = if best.variance > 0.0 && best.excess > 0.0 {
            best.rate + log_gap * best.excess / best.variance
        } else {
            f64::NAN
        };
        let next = if newton > lo && newton < hi { newton } else { (lo * hi).sqrt() };
        if residual.abs() <= tol {
            polish += 1;
            let settled = (next - best.rate).abs() <= 4.0 * f64::EPSILON * best.rate;
            if settled || polish > POLISH_STEPS {
                break;
            }
        }
        if next == rate || hi - lo <= 2.0 * f64::EPSILON * hi {
            break;
        }
        rate = next;
    }

    let residual = target_mean - best.mean;
    if residual.abs() <= tol {
        Ok(LambdaSolveResult {
            rate: best.rate,
            iterations,
            residual,
            bracket: (lo.min(best.rate), hi.max(best.rate)),
        })
    } else {
        Err(MaxentError::MaxIterations { iterations, rate: best.rate, residual })
    }
}

/// `⟨t⟩ = (d/2)·coth(λd/2)` for the infinite ladder `t_n = d(n + ½)`.
pub fn harmonic_mean_closed_form(d: f64, lambda: f64) -> Result<f64, MaxentError> {
    let x = 0.5 * lambda * d;
    if !(d.is_finite() && d > 0.0 && lambda.is_finite() && lambda > 0.0 && x > 0.0) {
        return Err(MaxentError::OutOfRange { d, lambda });
    }
    let value = 0.5 * d / x.tanh();
    if value.is_finite() {
        Ok(value)
    } else {
        Err(MaxentError::OutOfRange { d, lambda })
    }
}

/// Central finite-difference estimate of `-∂⟨x⟩/∂(Tr ρ ln ρ)` along the
/// Gibbs family.
///
/// Along the family `Tr ρ ln ρ = -rate·⟨x⟩ - ln Z`, whose rate derivative is
/// `-rate·d⟨x⟩/d(rate)`, so the ratio is exactly `1/rate`. That is the
/// analytic oracle. `rate_reading_gap` records how far the estimate sits
/// from `rate` itself, the other possible identification of the ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivativeCheckReport {
    pub rate: f64,
    pub fd_ratio: f64,
    pub analytic_oracle: f64,
    pub step: f64,
    pub abs_error: f64,
    pub rate_reading_gap: f64,
}

pub fn finite_difference_rate_check(
    spectrum: &Spectrum,
    rate: f64,
    h: f64,
) -> Result<DerivativeCheckReport, MaxentError> {
    if !(h.is_finite() && h > 0.0 && rate.is_finite() && rate - h > 0.0) {
        return Err(MaxentError::InvalidStep { rate, h });
    }
    if spectrum.len() < 2 {
        return Err(MaxentError::ConstantEntropy);
    }
    let (d_mean, d_entropy) = central_differences(spectrum, rate, h)?;
    if d_entropy == 0.0 {
        return Err(MaxentError::ConstantEntropy);
    }
    let fd_ratio = -d_mean / d_entropy;
    let analytic_oracle = 1.0 / rate;
    Ok(DerivativeCheckReport {
        rate,
        fd_ratio,
        analytic_oracle,
        step: h,
        abs_error: (fd_ratio - analytic_oracle).abs(),
        rate_reading_gap: (fd_ratio - rate).abs(),
    })
}

/// `(⟨x⟩(r+h) - ⟨x⟩(r-h), S̃(r+h) - S̃(r-h))` without subtracting the two
/// evaluations. With `δ_i = ln p_i(r-h) - ln p_i(r+h) = 2h(x_i - x_min) - L`
/// and `L = ln Σ p_i(r+h)·e^{2h(x_i - x_min)}`, the change in each
/// probability is `p_i(r+h)·expm1(δ_i)`, which keeps full relative accuracy
/// when the entropy barely moves.
fn central_differences(spectrum: &Spectrum, rate: f64, h: f64) -> Result<(f64, f64), MaxentError> {
    let plus = boltzmann_weights(spectrum, rate + h)?;
    let x0 = spectrum.min_value();
    let u: Vec<f64> = spectrum.values().map(|x| 2.0 * h * (x - x0)).collect();
    let l = compensated_sum(plus.probs().iter().zip(&u).map(|(p, ui)| p * ui.exp_m1())).ln_1p();
    let (mut d_mean, mut d_entropy) = (CompensatedSum::default(), CompensatedSum::default());
    let levels = spectrum.values().zip(spectrum.degeneracies());
    for (((x, g), (&p, &lp)), &ui) in levels.zip(plus.probs().iter().zip(plus.log_probs())).zip(&u) {
        let delta = ui - l;
        let dp = p * delta.exp_m1();
        d_mean.add(-(x - x0) * dp);
        d_entropy.add(-dp * (lp - (g as f64).ln()) - (p + dp) * delta);
    }
    Ok((d_mean.value(), d_entropy.value()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RichardsonReport {
    pub error_h: f64,
    pub error_half_h: f64,
    /// `log2(error_h / error_half_h)`; infinite when the finer error is zero.
    pub observed_order: f64,
}

/// Observed convergence order of [`finite_difference_rate_check`] from the
/// steps `h` and `h/2`.
pub fn richardson_order(spectrum: &Spectrum, rate: f64, h: f64) -> Result<RichardsonReport, MaxentError> {
    let coarse = finite_difference_rate_check(spectrum, rate, h)?;
    let fine = finite_difference_rate_check(spectrum, rate, 0.5 * h)?;
    let observed_order = if fine.abs_error == 0.0 {
        f64::INFINITY
    } else {
        (coarse.abs_error / fine.abs_error).log2()
    };
    Ok(RichardsonReport {
        error_h: coarse.abs_error,
        error_half_h: fine.abs_error,
        observed_order,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxentReport {
    pub trials: u32,
    /// Largest `S(perturbed) - S(gibbs)` observed, `S = -Σ p ln(p/g)`.
    pub max_gain: f64,
    /// Trials whose direction admitted no non-negative step.
    pub infeasible: u32,
}

const MAX_DIRECTION_RETRIES: u32 = 50;
const STEP_DECADES: f64 = 3.0;

/// Orthonormal basis (restricted to `support`) of the constraints a
/// perturbation must preserve.
fn constraint_basis(values: &[f64], support: &[usize], keep_mean: bool) -> Vec<Vec<f64>> {
    let k = support.len() as f64;
    let ones = vec![1.0 / k.sqrt(); support.len()];
    let mut basis = vec![ones];
    if keep_mean {
        let avg = compensated_sum(support.iter().map(|&i| values[i])) / k;
        let centered: Vec<f64> = support.iter().map(|&i| values[i] - avg).collect();
        let norm = compensated_sum(centered.iter().map(|c| c * c)).sqrt();
        basis.push(centered.iter().map(|c| c / norm).collect());
    }
    basis
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    // twice, for orthogonality at rounding level
    for _ in 0..2 {
        for b in basis {
            let dot = compensated_sum(v.iter().zip(b).map(|(x, y)| x * y));
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
    }
}

fn entropy(probs: &[f64], weights: &GibbsWeights) -> f64 {
    -entropy_trace_of(probs, weights.spectrum().degeneracies())
}

fn perturbation_trial(
    weights: &GibbsWeights,
    support: &[usize],
    basis: &[Vec<f64>],
    step: f64,
    seed: u64,
    trial: u32,
) -> Option<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    let base = weights.probs();
    let reference = entropy(base, weights);
    for _ in 0..MAX_DIRECTION_RETRIES {
        let mut v: Vec<f64> = support.iter().map(|_| StandardNormal.sample(&mut rng)).collect();
        project_out(&mut v, basis);
        let norm = compensated_sum(v.iter().map(|x| x * x)).sqrt();
        if !(norm > 0.0) {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        // largest step keeping every probability non-negative
        let limit = support
            .iter()
            .zip(&v)
            .filter(|(_, &vi)| vi < 0.0)
            .map(|(&i, &vi)| base[i] / -vi)
            .fold(f64::INFINITY, f64::min);
        if !(limit > 0.0) {
            continue;
        }
        // magnitudes spread over three decades below `step`
        let scale = 10f64.powf(-STEP_DECADES * rng.random::<f64>());
        let s = (step * scale).min(0.5 * limit);
        let mut p = base.to_vec();
        for (&i, &vi) in support.iter().zip(&v) {
            p[i] += s * vi;
        }
        return Some(entropy(&p, weights) - reference);
    }
    None
}

fn run_trials(
    weights: &GibbsWeights,
    trials: u32,
    step: f64,
    seed: u64,
    keep_mean: bool,
) -> Result<MaxentReport, MaxentError> {
    if !(step.is_finite() && step >= 0.0) {
        return Err(MaxentError::InvalidStep { rate: weights.rate(), h: step });
    }
    let support: Vec<usize> = (0..weights.probs().len()).filter(|&i| weights.probs()[i] > 0.0).collect();
    if support.len() < 3 {
        return Err(MaxentError::TooFewLevels { needed: 3, got: support.len() });
    }
    let values: Vec<f64> = weights.spectrum().values().collect();
    let basis = constraint_basis(&values, &support, keep_mean);
    let gains: Vec<Option<f64>> = (0..trials)
        .into_par_iter()
        .map(|t| perturbation_trial(weights, &support, &basis, step, seed, t))
        .collect();
    let infeasible = gains.iter().filter(|g| g.is_none()).count() as u32;
    let max_gain = gains.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(MaxentReport { trials, max_gain, infeasible })
}

/// Largest entropy gain over random perturbations that keep the
/// distribution normalized, non-negative and at the same mean. Each trial
/// draws from its own stream derived from `(seed, trial)`: a unit direction
/// and a step length between `step/1000` and `step`, capped at half the
/// distance to the nearest zero probability.
pub fn maxent_verify(
    weights: &GibbsWeights,
    trials: u32,
    step: f64,
    seed: u64,
) -> Result<MaxentReport, MaxentError> {
    run_trials(weights, trials, step, seed, true)
}

/// Same as [`maxent_verify`] but only normalization is preserved, so the
/// mean is free to move and the entropy can rise.
pub fn maxent_negative_control(
    weights: &GibbsWeights,
    trials: u32,
    step: f64,
    seed: u64,
) -> Result<MaxentReport, MaxentError> {
    run_trials(weights, trials, step, seed, false)
}
