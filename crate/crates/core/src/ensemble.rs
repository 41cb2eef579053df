//! Boltzmann weights over a [`Spectrum`].
//!
//! The same code serves the energy ensemble (rate = β, weights e^{-βE_i})
//! and the temporal ensemble (rate = λ, weights e^{-λt_i}). Everything is
//! evaluated relative to the lowest level so that large `rate·x` products
//! neither overflow nor underflow the partition sum.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectra::{Spectrum, SpectrumKind};
use crate::sum::compensated_sum;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("rate must be finite and non-negative, got {0}")]
    InvalidRate(f64),
    #[error("rate 0 is undefined on a tail-truncated spectrum (the full partition sum diverges)")]
    ZeroRateOnTruncated,
    #[error("partition function is not finite (rate {rate})")]
    NonFinitePartition { rate: f64 },
    #[error("expected a {expected} spectrum, got {got}")]
    WrongKind { expected: SpectrumKind, got: SpectrumKind },
    #[error("initial population must be finite and positive, got {0}")]
    InvalidPopulation(f64),
    #[error("time level {t} precedes the origin t0 = {t0}")]
    BeforeOrigin { t: f64, t0: f64 },
    #[error("persistence constant must be finite and positive, got {0}")]
    InvalidPersistenceConstant(f64),
}

fn check_rate(spectrum: &Spectrum, rate: f64) -> Result<(), EnsembleError> {
    if !(rate.is_finite() && rate >= 0.0) {
        return Err(EnsembleError::InvalidRate(rate));
    }
    if rate == 0.0 && spectrum.is_truncated() {
        return Err(EnsembleError::ZeroRateOnTruncated);
    }
    Ok(())
}

/// Log-weights `ln g_i - rate·(x_i - x_0)` and their maximum.
fn shifted_log_weights(spectrum: &Spectrum, rate: f64) -> (Vec<f64>, f64) {
    let x0 = spectrum.min_value();
    let a: Vec<f64> = spectrum
        .levels()
        .iter()
        .map(|l| (l.degeneracy as f64).ln() - rate * (l.value - x0))
        .collect();
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (a, max)
}

/// `ln Σ_i g_i·e^{-rate·x_i}`.
pub fn log_partition_function(spectrum: &Spectrum, rate: f64) -> Result<f64, EnsembleError> {
    check_rate(spectrum, rate)?;
    let (a, max) = shifted_log_weights(spectrum, rate);
    let sum = compensated_sum(a.iter().map(|&ai| (ai - max).exp()));
    let lz = -rate * spectrum.min_value() + max + sum.ln();
    if lz.is_finite() {
        Ok(lz)
    } else {
        Err(EnsembleError::NonFinitePartition { rate })
    }
}

/// Normalized Boltzmann distribution over the levels of a spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsWeights {
    spectrum: Spectrum,
    rate: f64,
    log_partition: f64,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

pub fn boltzmann_weights(spectrum: &Spectrum, rate: f64) -> Result<GibbsWeights, EnsembleError> {
    check_rate(spectrum, rate)?;
    let (a, max) = shifted_log_weights(spectrum, rate);
    // the peak term is exactly 1; keeping it out of the sum lets ln_1p
    // resolve the remaining mass when it is below machine epsilon
    let peak = a.iter().position(|&ai| ai == max).expect("spectrum is non-empty");
    let rest = compensated_sum(
        a.iter().enumerate().filter(|&(i, _)| i != peak).map(|(_, &ai)| (ai - max).exp()),
    );
    let log_sum = rest.ln_1p();
    let log_partition = -rate * spectrum.min_value() + max + log_sum;
    if !log_partition.is_finite() {
        return Err(EnsembleError::NonFinitePartition { rate });
    }
    let log_probs: Vec<f64> = a.iter().map(|&ai| ai - max - log_sum).collect();
    let probs = log_probs.iter().map(|lp| lp.exp()).collect();
    Ok(GibbsWeights {
        spectrum: spectrum.clone(),
        rate,
        log_partition,
        probs,
        log_probs,
    })
}

impl GibbsWeights {
    pub fn spectrum(&self) -> &Spectrum {
        &self.spectrum
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn log_partition(&self) -> f64 {
        self.log_partition
    }

    /// Aggregate probability of each level (degeneracy included).
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// `ln probs_i`, finite even where `probs_i` underflows to zero.
    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    /// `Σ p_i·x_i`.
    pub fn mean(&self) -> f64 {
        self.spectrum.min_value() + self.mean_excess()
    }

    /// `⟨x⟩ - x_min`, without the rounding of the absolute mean.
    pub(crate) fn mean_excess(&self) -> f64 {
        let x0 = self.spectrum.min_value();
        compensated_sum(self.spectrum.values().zip(&self.probs).map(|(x, p)| p * (x - x0)))
    }

    /// `Σ p_i·(x_i - mean)²`; also `-d(mean)/d(rate)`.
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        compensated_sum(
            self.spectrum
                .values()
                .zip(&self.probs)
                .map(|(x, p)| p * (x - mean) * (x - mean)),
        )
    }

    /// `Tr ρ ln ρ = Σ p_i·ln(p_i/g_i)`, with each level's probability spread
    /// evenly over its `g_i` microstates. Never positive.
    pub fn entropy_trace(&self) -> f64 {
        // log_probs rather than ln(probs): near-certain levels keep their
        // deviation from ln 1 = 0
        compensated_sum(
            self.probs
                .iter()
                .zip(&self.log_probs)
                .zip(self.spectrum.degeneracies())
                .map(|((&p, &lp), g)| if p > 0.0 { p * (lp - (g as f64).ln()) } else { 0.0 }),
        )
    }
}

/// `Σ p_i·ln(p_i/g_i)` for an arbitrary distribution over levels.
pub fn entropy_trace_of(probs: &[f64], degeneracies: impl Iterator<Item = u64>) -> f64 {
    compensated_sum(probs.iter().zip(degeneracies).map(|(&p, g)| {
        if p > 0.0 {
            p * (p / g as f64).ln()
        } else {
            0.0
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalPoint {
    pub t: f64,
    pub count: f64,
}

/// Expected number of undecayed systems at each admissible decay instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub t0: f64,
    pub n0: f64,
    pub points: Vec<SurvivalPoint>,
}

impl SurvivalCurve {
    pub fn counts(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.count)
    }
}

/// `N(t_i) = N_0·e^{-λ·t_i}`, times measured from `t0 = 0`.
pub fn survival_curve(n0: f64, weights: &GibbsWeights) -> Result<SurvivalCurve, EnsembleError> {
    let spectrum = weights.spectrum();
    if spectrum.kind() != SpectrumKind::Time {
        return Err(EnsembleError::WrongKind {
            expected: SpectrumKind::Time,
            got: spectrum.kind(),
        });
    }
    if !(n0.is_finite() && n0 > 0.0) {
        return Err(EnsembleError::InvalidPopulation(n0));
    }
    let t0 = 0.0;
    if spectrum.min_value() < t0 {
        return Err(EnsembleError::BeforeOrigin { t: spectrum.min_value(), t0 });
    }
    let lambda = weights.rate();
    let points = spectrum
        .values()
        .map(|t| SurvivalPoint { t, count: n0 * (-lambda * (t - t0)).exp() })
        .collect();
    Ok(SurvivalCurve { t0, n0, points })
}

/// Persistence `P = λ / l`.
pub fn persistence(lambda: f64, l: f64) -> Result<f64, EnsembleError> {
    if !(l.is_finite() && l > 0.0) {
        return Err(EnsembleError::InvalidPersistenceConstant(l));
    }
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(EnsembleError::InvalidRate(lambda));
    }
    Ok(lambda / l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectra::{harmonic_time_spectrum_for_tail, HarmonicParams};
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn time(values: &[f64]) -> Spectrum {
        Spectrum::new(SpectrumKind::Time, values, None).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn log_partition_examples() {
        assert!(close(log_partition_function(&time(&[0.0, 1.0]), 0.0).unwrap(), LN_2, 1e-15));
        for rate in [0.0, 0.3, 7.0, 1e4] {
            assert_eq!(log_partition_function(&time(&[0.0]), rate).unwrap(), 0.0);
        }
        let unit = HarmonicParams::with_quantum(1.0).unwrap();
        let ladder = harmonic_time_spectrum_for_tail(&unit, 1.0, 1e-16).unwrap();
        // geometric series Σ_{n≥0} e^{-(n+1/2)}
        let oracle = ((-0.5f64).exp() / (1.0 - (-1.0f64).exp())).ln();
        assert!(close(log_partition_function(&ladder, 1.0).unwrap(), oracle, 1e-14));
    }

    #[test]
    fn log_partition_large_exponents() {
        let s = time(&[700.0, 701.0]);
        let lz = log_partition_function(&s, 1.0).unwrap();
        let oracle = -700.0 + (1.0 + (-1.0f64).exp()).ln();
        assert!(close(lz, oracle, 1e-12));
        let s = time(&[-700.0, -699.0]);
        let lz = log_partition_function(&s, 1.0).unwrap();
        assert!(close(lz, 700.0 + (1.0 + (-1.0f64).exp()).ln(), 1e-12));
    }

    #[test]
    fn rate_validation() {
        let s = time(&[0.0, 1.0]);
        assert_eq!(log_partition_function(&s, -1.0), Err(EnsembleError::InvalidRate(-1.0)));
        assert!(matches!(boltzmann_weights(&s, f64::NAN), Err(EnsembleError::InvalidRate(_))));
        let unit = HarmonicParams::with_quantum(1.0).unwrap();
        let ladder = harmonic_time_spectrum_for_tail(&unit, 1.0, 1e-6).unwrap();
        assert_eq!(log_partition_function(&ladder, 0.0), Err(EnsembleError::ZeroRateOnTruncated));
        let far = time(&[-1e308, 0.0]);
        assert!(matches!(
            log_partition_function(&far, 10.0),
            Err(EnsembleError::NonFinitePartition { .. })
        ));
    }

    #[test]
    fn weights_examples() {
        let s = time(&[0.0, 1.0]);
        assert_eq!(boltzmann_weights(&s, 0.0).unwrap().probs(), &[0.5, 0.5]);
        let cold = boltzmann_weights(&s, 1e4).unwrap();
        assert!(close(cold.probs()[0], 1.0, 1e-12));
        assert!(close(cold.probs()[1], 0.0, 1e-12));
        assert!(cold.log_probs()[1].is_finite());
        let w = boltzmann_weights(&s, LN_2).unwrap();
        assert!(close(w.probs()[0], 2.0 / 3.0, 1e-15));
        assert!(close(w.probs()[1], 1.0 / 3.0, 1e-15));
        assert_eq!(w, boltzmann_weights(&s, LN_2).unwrap());
    }

    #[test]
    fn degenerate_levels_weigh_by_multiplicity() {
        let s = Spectrum::new(SpectrumKind::Energy, &[0.0, 1.0], Some(&[1, 3])).unwrap();
        let w = boltzmann_weights(&s, 0.0).unwrap();
        assert!(close(w.probs()[0], 0.25, 1e-15));
        assert!(close(w.probs()[1], 0.75, 1e-15));
        // four equally likely microstates
        assert!(close(w.entropy_trace(), -(4.0f64).ln(), 1e-15));
    }

    #[test]
    fn moments_examples() {
        let s = time(&[0.0, 1.0]);
        let uniform = boltzmann_weights(&s, 0.0).unwrap();
        assert_eq!(uniform.mean(), 0.5);
        assert_eq!(uniform.variance(), 0.25);
        let w = boltzmann_weights(&s, LN_2).unwrap();
        assert!(close(w.mean(), 1.0 / 3.0, 1e-15));
        assert!(close(w.variance(), 2.0 / 9.0, 1e-15));
        for rate in [0.0, 2.0, 50.0] {
            let single = boltzmann_weights(&time(&[3.25]), rate).unwrap();
            assert_eq!(single.mean(), 3.25);
            assert_eq!(single.variance(), 0.0);
        }
    }

    #[test]
    fn harmonic_mean_matches_coth() {
        let unit = HarmonicParams::with_quantum(1.0).unwrap();
        let ladder = harmonic_time_spectrum_for_tail(&unit, 1.0, 1e-16).unwrap();
        let w = boltzmann_weights(&ladder, 1.0).unwrap();
        let oracle = 0.5 / (0.5f64).tanh();
        assert!(((w.mean() - oracle) / oracle).abs() < 1e-13);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(boltzmann_weights(&time(&[4.0]), 1.0).unwrap().entropy_trace(), 0.0);
        let s = time(&[0.0, 1.0]);
        assert!(close(boltzmann_weights(&s, 0.0).unwrap().entropy_trace(), -LN_2, 1e-15));
        let p = [2.0f64 / 3.0, 1.0 / 3.0];
        let oracle = p[0] * p[0].ln() + p[1] * p[1].ln();
        assert!(close(boltzmann_weights(&s, LN_2).unwrap().entropy_trace(), oracle, 1e-15));
    }

    #[test]
    fn survival_examples() {
        let s = time(&[0.0]);
        let c = survival_curve(1000.0, &boltzmann_weights(&s, 3.0).unwrap()).unwrap();
        assert_eq!(c.points[0].count, 1000.0);

        let half_life = time(&[0.0, LN_2 / 0.7]);
        let c = survival_curve(1000.0, &boltzmann_weights(&half_life, 0.7).unwrap()).unwrap();
        assert!(close(c.points[1].count, 500.0, 1e-10));

        let c = survival_curve(1000.0, &boltzmann_weights(&time(&[0.0, 1.0, 2.0]), 1.0).unwrap()).unwrap();
        let expected = [1000.0, 1000.0 * (-1.0f64).exp(), 1000.0 * (-2.0f64).exp()];
        for (got, want) in c.counts().zip(expected) {
            assert!(close(got, want, 1e-12));
        }
        assert!(c.points.windows(2).all(|w| w[1].count < w[0].count));
        assert_eq!(c.t0, 0.0);
    }

    #[test]
    fn survival_errors() {
        let e = Spectrum::new(SpectrumKind::Energy, &[0.0, 1.0], None).unwrap();
        let w = boltzmann_weights(&e, 1.0).unwrap();
        assert!(matches!(survival_curve(10.0, &w), Err(EnsembleError::WrongKind { .. })));
        let w = boltzmann_weights(&time(&[0.0]), 1.0).unwrap();
        assert!(matches!(survival_curve(0.0, &w), Err(EnsembleError::InvalidPopulation(_))));
        let w = boltzmann_weights(&time(&[-1.0, 0.0]), 1.0).unwrap();
        assert!(matches!(survival_curve(10.0, &w), Err(EnsembleError::BeforeOrigin { .. })));
    }

    #[test]
    fn persistence_examples() {
        assert_eq!(persistence(3.0, 1.0).unwrap(), 3.0);
        assert_eq!(persistence(3.0, 3.0).unwrap(), 1.0);
        assert_eq!(persistence(1.5, 0.5).unwrap(), 3.0);
        assert!(persistence(1.0, 0.0).is_err());
        assert!(persistence(1.0, -2.0).is_err());
    }

    fn spectrum_strategy(max_levels: usize) -> impl Strategy<Value = Spectrum> {
        prop::collection::vec(0.0f64..1e3, 1..max_levels)
            .prop_map(|v| Spectrum::new(SpectrumKind::Time, &v, None).unwrap())
    }

    fn dyadic_spectrum_strategy() -> impl Strategy<Value = Spectrum> {
        prop::collection::vec(0u32..(1 << 20), 2..200).prop_map(|v| {
            let values: Vec<f64> = v.iter().map(|&k| k as f64 / 1024.0).collect();
            Spectrum::new(SpectrumKind::Time, &values, None).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn normalization(s in spectrum_strategy(10_000), log_rate in -3.0f64..2.0) {
            let w = boltzmann_weights(&s, 10f64.powf(log_rate)).unwrap();
            prop_assert!((compensated_sum(w.probs().iter().copied()) - 1.0).abs() <= 1e-12);
            prop_assert!(w.probs().iter().all(|&p| p >= 0.0));
            prop_assert_eq!(w.probs().len(), s.len());
        }

        #[test]
        fn exponential_family_identity(s in spectrum_strategy(2_000), log_rate in -3.0f64..2.0) {
            let w = boltzmann_weights(&s, 10f64.powf(log_rate)).unwrap();
            let identity = -(w.rate() * w.mean() + w.log_partition());
            prop_assert!((w.entropy_trace() - identity).abs() <= 1e-10);
            prop_assert!(w.entropy_trace() <= 0.0);
            prop_assert!(w.variance() >= 0.0);
        }

        #[test]
        fn shift_covariance(s in dyadic_spectrum_strategy(), shift in -4096i32..4096, rate_k in 1u32..64) {
            let rate = rate_k as f64 / 16.0;
            let a = shift as f64 / 8.0;
            let values: Vec<f64> = s.values().map(|x| x + a).collect();
            let degs: Vec<u64> = s.degeneracies().collect();
            let shifted = Spectrum::new(SpectrumKind::Time, &values, Some(&degs)).unwrap();
            let w = boltzmann_weights(&s, rate).unwrap();
            let ws = boltzmann_weights(&shifted, rate).unwrap();
            for (p, q) in w.probs().iter().zip(ws.probs()) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
            prop_assert!((ws.log_partition() - (w.log_partition() - rate * a)).abs() <= 1e-10);
        }

        #[test]
        fn mean_decreases_with_rate(s in spectrum_strategy(500)) {
            prop_assume!(s.len() >= 2);
            let scale = s.max_value() - s.min_value();
            let rates: Vec<f64> = (0..30).map(|k| 10f64.powf(-3.0 + 0.1 * k as f64) / scale.max(1e-9)).collect();
            let means: Vec<f64> = rates.iter().map(|&r| boltzmann_weights(&s, r).unwrap().mean()).collect();
            for m in means.windows(2) {
                prop_assert!(m[1] < m[0]);
            }
        }

        #[test]
        fn survival_ratios_match_weights(values in prop::collection::vec(0.0f64..20.0, 2..50), rate in 0.01f64..3.0) {
            let s = Spectrum::new(SpectrumKind::Time, &values, None).unwrap();
            let w = boltzmann_weights(&s, rate).unwrap();
            let c = survival_curve(1e6, &w).unwrap();
            for i in 0..s.len() {
                for j in 0..s.len() {
                    let lhs = c.points[i].count / c.points[j].count;
                    let rhs = w.probs()[i] / w.probs()[j];
                    prop_assert!(((lhs - rhs) / rhs).abs() <= 1e-12);
                }
            }
            prop_assert!(c.points[0].count <= c.n0);
            prop_assert!(c.points.windows(2).all(|p| p[1].count <= p[0].count));
        }
    }
}
