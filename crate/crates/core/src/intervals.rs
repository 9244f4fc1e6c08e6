//! Equal-tail prediction intervals from predictive mixtures, empirical
//! coverage, and the coverage-constrained minimum-variance model-list rule.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::PredictiveMixture;
use crate::numeric::seed_stream;
use crate::tree::FactorTree;

pub const MIN_COVERAGE_REPLICATES: usize = 100;

const MAX_BISECTIONS: usize = 400;

/// Smallest `x` with `F(x) ≥ p`, by bisection on the exact mixture CDF.
pub fn mixture_quantile(m: &PredictiveMixture, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidProbability(p));
    }
    let (mut lo, mut hi) = m
        .weights()
        .iter()
        .zip(m.components())
        .filter(|(w, _)| **w > 0.0)
        .map(|(_, c)| c.support_bracket())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (c, d)| {
            (a.min(c), b.max(d))
        });
    lo -= 1.0;
    hi += 1.0;
    while m.cdf(lo) >= p {
        lo -= (hi - lo).max(1.0);
    }
    while m.cdf(hi) < p {
        hi += (hi - lo).max(1.0);
    }
    for _ in 0..MAX_BISECTIONS {
        let mid = lo + 0.5 * (hi - lo);
        if mid <= lo || mid >= hi {
            break;
        }
        if m.cdf(mid) >= p {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    // A jump of a discrete component inside the final bracket is the exact
    // answer; bisection alone only approaches it from above.
    let mut atoms: Vec<f64> = m
        .weights()
        .iter()
        .zip(m.components())
        .filter(|(w, _)| **w > 0.0)
        .flat_map(|(_, c)| c.atoms_in(lo, hi))
        .collect();
    atoms.sort_by(f64::total_cmp);
    Ok(atoms.into_iter().find(|a| m.cdf(*a) >= p).unwrap_or(hi))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub lower: f64,
    pub upper: f64,
    pub alpha: f64,
    pub source: String,
}

impl PredictionInterval {
    pub fn contains(&self, y: f64) -> bool {
        self.lower <= y && y <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// `[q(α/2), q(1 − α/2)]` of the mixture.
pub fn prediction_interval(m: &PredictiveMixture, alpha: f64) -> Result<PredictionInterval> {
    labelled_interval(m, alpha, "mixture")
}

pub fn labelled_interval(
    m: &PredictiveMixture,
    alpha: f64,
    source: &str,
) -> Result<PredictionInterval> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} outside (0, 1)"
        )));
    }
    Ok(PredictionInterval {
        lower: mixture_quantile(m, alpha / 2.0)?,
        upper: mixture_quantile(m, 1.0 - alpha / 2.0)?,
        alpha,
        source: source.to_string(),
    })
}

/// Fraction of `draws` inside the interval.
pub fn coverage_of_draws(pi: &PredictionInterval, draws: &[f64]) -> f64 {
    if draws.is_empty() {
        return 0.0;
    }
    draws.iter().filter(|y| pi.contains(**y)).count() as f64 / draws.len() as f64
}

fn check_replicates(b: usize) -> Result<()> {
    if b < MIN_COVERAGE_REPLICATES {
        return Err(Error::InvalidArgument(format!(
            "{b} coverage replicates, need at least {MIN_COVERAGE_REPLICATES}"
        )));
    }
    Ok(())
}

/// Coverage of a fixed interval against `b` fresh outcomes from `generator`.
pub fn coverage_of_interval<G>(
    pi: &PredictionInterval,
    generator: G,
    b: usize,
    seed: u64,
) -> Result<f64>
where
    G: Fn(&mut ChaCha8Rng) -> f64 + Sync,
{
    check_replicates(b)?;
    let hits: usize = (0..b)
        .into_par_iter()
        .map(|i| usize::from(pi.contains(generator(&mut seed_stream(seed, i as u64)))))
        .sum();
    Ok(hits as f64 / b as f64)
}

/// Coverage when each replicate builds its own interval: `replicate(i, rng)`
/// returns the replicate's interval and a fresh outcome.
pub fn coverage_estimate<F>(replicate: F, b: usize, seed: u64) -> Result<f64>
where
    F: Fn(usize, &mut ChaCha8Rng) -> Result<(PredictionInterval, f64)> + Sync,
{
    check_replicates(b)?;
    let hits: Result<Vec<bool>> = (0..b)
        .into_par_iter()
        .map(|i| {
            let (pi, y) = replicate(i, &mut seed_stream(seed, i as u64))?;
            Ok(pi.contains(y))
        })
        .collect();
    Ok(hits?.iter().filter(|h| **h).count() as f64 / b as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub candidate: String,
    pub coverage: f64,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelListReport {
    pub rows: Vec<CandidateSummary>,
    pub chosen: usize,
    /// False when no candidate had coverage within δ of nominal and the
    /// closest-coverage fallback was used.
    pub within_delta: bool,
    pub nominal: f64,
    pub delta: f64,
}

impl ModelListReport {
    pub fn flag(&self) -> Option<&'static str> {
        (!self.within_delta).then_some("no candidate within delta")
    }
}

/// Among candidates with coverage in `(1−α−δ, 1−α+δ)`, the one with the
/// smallest predictive variance; otherwise the one with coverage closest to
/// `1 − α`. Ties go to the lowest index.
pub fn choose_model_list(
    rows: &[CandidateSummary],
    alpha: f64,
    delta: f64,
) -> Result<ModelListReport> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no candidate model lists".into()));
    }
    if !(delta > 0.0) || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < alpha < 1 and delta > 0, got alpha {alpha}, delta {delta}"
        )));
    }
    let nominal = 1.0 - alpha;
    let eligible: Vec<usize> = (0..rows.len())
        .filter(|&i| (rows[i].coverage - nominal).abs() < delta)
        .collect();
    let (chosen, within_delta) = match eligible.first() {
        Some(&first) => (
            eligible.iter().copied().fold(first, |b, i| {
                if rows[i].variance < rows[b].variance {
                    i
                } else {
                    b
                }
            }),
            true,
        ),
        None => (
            (0..rows.len()).fold(0, |b, i| {
                if (rows[i].coverage - nominal).abs() < (rows[b].coverage - nominal).abs() {
                    i
                } else {
                    b
                }
            }),
            false,
        ),
    };
    Ok(ModelListReport {
        rows: rows.to_vec(),
        chosen,
        within_delta,
        nominal,
        delta,
    })
}

/// Scores each candidate tree by the coverage of its flattened mixture's
/// interval over `g` outcomes drawn from `outcomes`, then applies
/// [`choose_model_list`].
pub fn select_model_list<G>(
    candidates: &[FactorTree],
    outcomes: G,
    alpha: f64,
    delta: f64,
    g: usize,
    seed: u64,
) -> Result<ModelListReport>
where
    G: Fn(&mut ChaCha8Rng) -> f64 + Sync,
{
    if g == 0 {
        return Err(Error::InvalidArgument("g must be positive".into()));
    }
    let draws: Vec<f64> = (0..g)
        .map(|i| outcomes(&mut seed_stream(seed, i as u64)))
        .collect();
    let rows = candidates
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let m = t.flatten();
            let pi = labelled_interval(&m, alpha, &format!("candidate-{i}"))?;
            Ok(CandidateSummary {
                candidate: pi.source.clone(),
                coverage: coverage_of_draws(&pi, &draws),
                variance: m.variance(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    choose_model_list(&rows, alpha, delta)
}

/// Draws `count` values from the mixture.
pub fn sample_mixture(m: &PredictiveMixture, count: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..count).map(|_| m.sample(rng)).collect()
}
