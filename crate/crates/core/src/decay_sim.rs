//! Monte Carlo realization of the temporal canonical ensemble.
//!
//! Each simulated system decays at one admissible instant `t_i`, drawn from
//! the Boltzmann distribution over the time spectrum. Draws are split into
//! fixed-size shards; shard `k` draws from ChaCha stream `k` of the run seed,
//! so the merged counts do not depend on how many threads executed the
//! shards.

use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::ensemble::{boltzmann_weights, survival_curve, EnsembleError, GibbsWeights, SurvivalCurve, SurvivalPoint};
use crate::maxent::{solve_rate_for_mean, LambdaSolveResult, MaxentError, DEFAULT_MAX_ITER};
use crate::spectra::{Spectrum, SpectrumKind};
use crate::sum::compensated_sum;

pub const DEFAULT_SHARD_SIZE: u64 = 1 << 16;
/// Minimum expected count per chi-square bin.
pub const MIN_EXPECTED_PER_BIN: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecayError {
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Solve(#[from] MaxentError),
    #[error("decay sampling needs a time spectrum, got {0}")]
    NotTimeSpectrum(SpectrumKind),
    #[error("sample size must be at least 1")]
    EmptySample,
    #[error("shard size must be at least 1")]
    InvalidShardSize,
    #[error("building the alias table: {0}")]
    AliasTable(String),
    #[error("building the worker pool: {0}")]
    WorkerPool(String),
    #[error("sample mean {mean} lies on the boundary of ({lo}, {hi}); the maximum-likelihood rate diverges")]
    DegenerateSample { mean: f64, lo: f64, hi: f64 },
    #[error("sample has {sample} levels but the model has {model}")]
    LevelMismatch { sample: usize, model: usize },
    #[error("only {0} bin(s) after pooling to at least 5 expected counts")]
    TooFewBins(usize),
}

/// Per-level decay counts of `n_total` simulated systems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecaySample {
    spectrum: Spectrum,
    counts: Vec<u64>,
    n_total: u64,
    seed: u64,
}

impl DecaySample {
    /// Wraps externally observed counts.
    pub fn from_counts(spectrum: Spectrum, counts: Vec<u64>, seed: u64) -> Result<Self, DecayError> {
        if spectrum.kind() != SpectrumKind::Time {
            return Err(DecayError::NotTimeSpectrum(spectrum.kind()));
        }
        if counts.len() != spectrum.len() {
            return Err(DecayError::LevelMismatch { sample: counts.len(), model: spectrum.len() });
        }
        let n_total: u64 = counts.iter().sum();
        if n_total == 0 {
            return Err(DecayError::EmptySample);
        }
        Ok(DecaySample { spectrum, counts, n_total, seed })
    }

    pub fn spectrum(&self) -> &Spectrum {
        &self.spectrum
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn n_total(&self) -> u64 {
        self.n_total
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Average decay instant `Σ c_i·t_i / n`.
    pub fn mean_time(&self) -> f64 {
        let t0 = self.spectrum.min_value();
        let n = self.n_total as f64;
        t0 + compensated_sum(
            self.spectrum
                .values()
                .zip(&self.counts)
                .map(|(t, &c)| c as f64 * (t - t0) / n),
        )
    }
}

/// How draws are split into independently seeded shards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardPlan {
    pub shard_size: u64,
}

impl Default for ShardPlan {
    fn default() -> Self {
        ShardPlan { shard_size: DEFAULT_SHARD_SIZE }
    }
}

fn check_time_weights(weights: &GibbsWeights) -> Result<(), DecayError> {
    match weights.spectrum().kind() {
        SpectrumKind::Time => Ok(()),
        other => Err(DecayError::NotTimeSpectrum(other)),
    }
}

fn sample_shards(
    table: &WeightedAliasIndex<f64>,
    levels: usize,
    n: u64,
    seed: u64,
    plan: ShardPlan,
) -> Vec<u64> {
    let shards = n.div_ceil(plan.shard_size);
    (0..shards)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            let draws = plan.shard_size.min(n - k * plan.shard_size);
            let mut counts = vec![0u64; levels];
            for _ in 0..draws {
                counts[table.sample(&mut rng)] += 1;
            }
            counts
        })
        .reduce(
            || vec![0u64; levels],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        )
}

/// Draws `n` decay instants using the default shard plan on the current
/// rayon pool.
pub fn sample_decay_times(weights: &GibbsWeights, n: u64, seed: u64) -> Result<DecaySample, DecayError> {
    sample_decay_times_with(weights, n, seed, ShardPlan::default(), None)
}

/// Draws `n` decay instants. `workers` fixes the thread count; `None` uses
/// the ambient rayon pool. The result depends only on `(weights, n, seed,
/// plan)`.
pub fn sample_decay_times_with(
    weights: &GibbsWeights,
    n: u64,
    seed: u64,
    plan: ShardPlan,
    workers: Option<usize>,
) -> Result<DecaySample, DecayError> {
    check_time_weights(weights)?;
    if n == 0 {
        return Err(DecayError::EmptySample);
    }
    if plan.shard_size == 0 {
        return Err(DecayError::InvalidShardSize);
    }
    let levels = weights.probs().len();
    let table = WeightedAliasIndex::new(weights.probs().to_vec())
        .map_err(|e| DecayError::AliasTable(e.to_string()))?;
    let counts = match workers {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k.max(1))
            .build()
            .map_err(|e| DecayError::WorkerPool(e.to_string()))?
            .install(|| sample_shards(&table, levels, n, seed, plan)),
        None => sample_shards(&table, levels, n, seed, plan),
    };
    Ok(DecaySample {
        spectrum: weights.spectrum().clone(),
        counts,
        n_total: n,
        seed,
    })
}

/// Survivors at each level: systems whose decay instant is not earlier
/// than `t_i`.
pub fn empirical_survival(sample: &DecaySample) -> SurvivalCurve {
    let mut decayed = 0u64;
    let points = sample
        .spectrum
        .values()
        .zip(&sample.counts)
        .map(|(t, &c)| {
            let alive = sample.n_total - decayed;
            decayed += c;
            SurvivalPoint { t, count: alive as f64 }
        })
        .collect();
    SurvivalCurve { t0: 0.0, n0: sample.n_total as f64, points }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub lambda_hat: f64,
    /// `1/sqrt(n·Var(t))` at `lambda_hat`.
    pub stderr: f64,
    pub log_likelihood: f64,
    pub solve: LambdaSolveResult,
}

/// Maximum-likelihood decay constant. For this one-parameter exponential
/// family the likelihood equation is `⟨t⟩(λ) = sample mean`, solved by
/// [`solve_rate_for_mean`].
pub fn estimate_lambda(sample: &DecaySample, tol: f64) -> Result<FitResult, DecayError> {
    let mean = sample.mean_time();
    let solve = match solve_rate_for_mean(&sample.spectrum, mean, tol, DEFAULT_MAX_ITER) {
        Ok(s) => s,
        Err(MaxentError::Unattainable { target, lo, hi }) => {
            return Err(DecayError::DegenerateSample { mean: target, lo, hi })
        }
        Err(MaxentError::TooFewLevels { .. }) => {
            let t = sample.spectrum.min_value();
            return Err(DecayError::DegenerateSample { mean, lo: t, hi: t });
        }
        Err(e) => return Err(e.into()),
    };
    let weights = boltzmann_weights(&sample.spectrum, solve.rate)?;
    let log_likelihood = compensated_sum(
        sample
            .counts
            .iter()
            .zip(weights.log_probs())
            .filter(|(&c, _)| c > 0)
            .map(|(&c, &lp)| c as f64 * lp),
    );
    let stderr = 1.0 / (sample.n_total as f64 * weights.variance()).sqrt();
    Ok(FitResult { lambda_hat: solve.rate, stderr, log_likelihood, solve })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodnessOfFit {
    pub chi2: f64,
    pub dof: i64,
    /// Upper-tail probability of `chi2`; absent when `dof < 1`.
    pub p_value: Option<f64>,
    /// `(observed, expected)` per pooled bin, lowest levels first.
    pub bins: Vec<(u64, f64)>,
}

/// Pearson chi-square of the sample against `weights`. Bins are formed from
/// the highest level downward, each closed once it expects at least five
/// counts; a short leftover at the bottom joins its neighbour. When
/// `fitted` is set, one extra degree of freedom is removed for the
/// estimated rate.
pub fn goodness_of_fit(
    sample: &DecaySample,
    weights: &GibbsWeights,
    fitted: bool,
) -> Result<GoodnessOfFit, DecayError> {
    if weights.probs().len() != sample.counts.len() {
        return Err(DecayError::LevelMismatch {
            sample: sample.counts.len(),
            model: weights.probs().len(),
        });
    }
    let n = sample.n_total as f64;
    let mut bins: Vec<(u64, f64)> = Vec::new();
    let (mut obs, mut exp) = (0u64, 0.0);
    for (&c, &p) in sample.counts.iter().zip(weights.probs()).rev() {
        obs += c;
        exp += n * p;
        if exp >= MIN_EXPECTED_PER_BIN {
            bins.push((obs, exp));
            obs = 0;
            exp = 0.0;
        }
    }
    if obs > 0 || exp > 0.0 {
        match bins.last_mut() {
            Some(last) => {
                last.0 += obs;
                last.1 += exp;
            }
            None => bins.push((obs, exp)),
        }
    }
    bins.reverse();
    if bins.len() < 2 {
        return Err(DecayError::TooFewBins(bins.len()));
    }
    let chi2 = compensated_sum(bins.iter().map(|&(o, e)| {
        let d = o as f64 - e;
        d * d / e
    }));
    let dof = bins.len() as i64 - 1 - i64::from(fitted);
    let p_value = if dof >= 1 {
        ChiSquared::new(dof as f64).ok().map(|d| d.sf(chi2))
    } else {
        None
    };
    Ok(GoodnessOfFit { chi2, dof, p_value, bins })
}

/// Empirical survivors next to the decay law at one level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalComparison {
    pub t: f64,
    /// `n·e^{-λ(t_i - t_first)}`: the decay law scaled to the sample size.
    pub decay_law: f64,
    /// `n·Σ_{j ≥ i} p_j`: expected survivors under the truncated model.
    pub model: f64,
    pub empirical: f64,
    /// Binomial standard error `sqrt(n·s·(1 - s))` with `s = decay_law/n`.
    pub stderr: f64,
}

/// Level-by-level comparison of [`empirical_survival`] against the decay
/// law from [`survival_curve`], normalized to the whole sample at the
/// first level.
pub fn compare_survival(sample: &DecaySample, weights: &GibbsWeights) -> Result<Vec<SurvivalComparison>, DecayError> {
    check_time_weights(weights)?;
    if weights.probs().len() != sample.counts.len() {
        return Err(DecayError::LevelMismatch {
            sample: sample.counts.len(),
            model: weights.probs().len(),
        });
    }
    let n = sample.n_total as f64;
    let law = survival_curve(1.0, weights)?;
    let first = law.points[0].count;
    let empirical = empirical_survival(sample);
    let mut tail = vec![0.0; weights.probs().len() + 1];
    for i in (0..weights.probs().len()).rev() {
        tail[i] = tail[i + 1] + weights.probs()[i];
    }
    Ok(law
        .points
        .iter()
        .zip(&empirical.points)
        .enumerate()
        .map(|(i, (l, e))| {
            let s = (l.count / first).min(1.0);
            SurvivalComparison {
                t: l.t,
                decay_law: n * s,
                model: n * tail[i].min(1.0),
                empirical: e.count,
                stderr: (n * s * (1.0 - s)).sqrt(),
            }
        })
        .collect())
}
