//! Component predictive distributions and finite weighted mixtures of them.
//!
//! All moments are closed form. The variance of a mixture is reported through
//! the within/between split, `Σ wᵢσᵢ² + Σ wᵢ(μᵢ − μ̄)²`, which is algebraically
//! the raw-moment expression `Σ wᵢ(σᵢ² + μᵢ²) − μ̄²` without its cancellation.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, DiscreteCDF};

use crate::error::{Error, Result};
use crate::numeric::{compensated_sum, mean, sample_variance, weighted_mean};

/// Tolerance on the sum of a weight vector.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Tolerance on the binomial mean/variance consistency check.
const BINOMIAL_TOL: f64 = 1e-10;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Family {
    #[default]
    Gaussian,
    BinomialCount {
        trials: u32,
        p: f64,
    },
    /// Samples are kept sorted.
    Empirical {
        samples: Vec<f64>,
    },
}

/// Predictive distribution of a future outcome under one fully specified model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawComponent")]
pub struct ComponentPredictive {
    mean: f64,
    variance: f64,
    family: Family,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawComponent {
    mean: f64,
    variance: f64,
    #[serde(default)]
    family: Family,
}

impl TryFrom<RawComponent> for ComponentPredictive {
    type Error = Error;

    fn try_from(raw: RawComponent) -> Result<Self> {
        Self::from_parts(raw.mean, raw.variance, raw.family)
    }
}

impl ComponentPredictive {
    pub fn gaussian(mean: f64, variance: f64) -> Result<Self> {
        Self::from_parts(mean, variance, Family::Gaussian)
    }

    pub fn binomial_count(trials: u32, p: f64) -> Result<Self> {
        let n = trials as f64;
        Self::from_parts(
            n * p,
            n * p * (1.0 - p),
            Family::BinomialCount { trials, p },
        )
    }

    /// Empirical predictive from draws; variance uses divisor n − 1.
    pub fn empirical(mut samples: Vec<f64>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidComponent(
                "empirical family requires at least 2 samples".into(),
            ));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidComponent("non-finite sample".into()));
        }
        samples.sort_by(f64::total_cmp);
        let m = mean(&samples);
        let v = sample_variance(&samples);
        Ok(Self {
            mean: m,
            variance: v,
            family: Family::Empirical { samples },
        })
    }

    /// Validating constructor used by deserialization.
    pub fn from_parts(mean: f64, variance: f64, family: Family) -> Result<Self> {
        if !mean.is_finite() || !variance.is_finite() {
            return Err(Error::InvalidComponent("non-finite moment".into()));
        }
        if variance < 0.0 {
            return Err(Error::InvalidComponent(format!(
                "negative variance {variance}"
            )));
        }
        match &family {
            Family::Gaussian => {}
            Family::BinomialCount { trials, p } => {
                if *trials == 0 {
                    return Err(Error::InvalidComponent("trials must be positive".into()));
                }
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::InvalidComponent(format!(
                        "success probability {p} outside [0, 1]"
                    )));
                }
                let n = *trials as f64;
                if (mean - n * p).abs() > BINOMIAL_TOL
                    || (variance - n * p * (1.0 - p)).abs() > BINOMIAL_TOL
                {
                    return Err(Error::InvalidComponent(
                        "binomial mean/variance inconsistent with trials and p".into(),
                    ));
                }
            }
            Family::Empirical { samples } => {
                let comp = Self::empirical(samples.clone())?;
                if (comp.mean - mean).abs() > 1e-9 * (1.0 + mean.abs())
                    || (comp.variance - variance).abs() > 1e-9 * (1.0 + variance)
                {
                    return Err(Error::InvalidComponent(
                        "empirical moments inconsistent with samples".into(),
                    ));
                }
                return Ok(comp);
            }
        }
        Ok(Self {
            mean,
            variance,
            family,
        })
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    /// P(Y ≤ x).
    pub fn cdf(&self, x: f64) -> f64 {
        match &self.family {
            Family::Gaussian => {
                if self.variance == 0.0 {
                    return if x >= self.mean { 1.0 } else { 0.0 };
                }
                let sd = self.variance.sqrt();
                statrs::distribution::Normal::new(self.mean, sd)
                    .map(|d| d.cdf(x))
                    .unwrap_or(f64::NAN)
            }
            Family::BinomialCount { trials, p } => {
                if x < 0.0 {
                    return 0.0;
                }
                let k = x.floor();
                if k >= *trials as f64 {
                    return 1.0;
                }
                statrs::distribution::Binomial::new(*p, *trials as u64)
                    .map(|d| d.cdf(k as u64))
                    .unwrap_or(f64::NAN)
            }
            Family::Empirical { samples } => {
                let count = samples.partition_point(|s| *s <= x);
                count as f64 / samples.len() as f64
            }
        }
    }

    /// An interval that contains essentially all of the probability mass.
    pub(crate) fn support_bracket(&self) -> (f64, f64) {
        match &self.family {
            Family::Gaussian => {
                let sd = self.variance.sqrt();
                (self.mean - 40.0 * sd, self.mean + 40.0 * sd)
            }
            Family::BinomialCount { trials, .. } => (-1.0, *trials as f64 + 1.0),
            Family::Empirical { samples } => (samples[0] - 1.0, samples[samples.len() - 1] + 1.0),
        }
    }

    /// Points carrying positive probability mass inside `[lo, hi]`.
    pub(crate) fn atoms_in(&self, lo: f64, hi: f64) -> Vec<f64> {
        match &self.family {
            Family::Gaussian if self.variance == 0.0 => {
                if (lo..=hi).contains(&self.mean) {
                    vec![self.mean]
                } else {
                    Vec::new()
                }
            }
            Family::Gaussian => Vec::new(),
            Family::BinomialCount { trials, .. } => {
                let a = lo.ceil().max(0.0) as i64;
                let b = hi.floor().min(*trials as f64) as i64;
                (a..=b).map(|k| k as f64).collect()
            }
            Family::Empirical { samples } => samples
                .iter()
                .copied()
                .filter(|s| (lo..=hi).contains(s))
                .collect(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.family {
            Family::Gaussian => {
                if self.variance == 0.0 {
                    return self.mean;
                }
                Normal::new(self.mean, self.variance.sqrt())
                    .expect("validated variance")
                    .sample(rng)
            }
            Family::BinomialCount { trials, p } => Binomial::new(*trials as u64, *p)
                .expect("validated probability")
                .sample(rng) as f64,
            Family::Empirical { samples } => samples[rng.random_range(0..samples.len())],
        }
    }
}

/// Finite mixture `Σ wᵢ pᵢ(y)` of component predictives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveMixture {
    weights: Vec<f64>,
    components: Vec<ComponentPredictive>,
}

impl PredictiveMixture {
    pub fn new(weights: Vec<f64>, components: Vec<ComponentPredictive>) -> Result<Self> {
        if components.is_empty() && weights.is_empty() {
            return Err(Error::EmptyMixture);
        }
        if weights.len() != components.len() {
            return Err(Error::Dimension(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        check_simplex(&weights, SIMPLEX_TOL)?;
        Ok(Self {
            weights,
            components,
        })
    }

    pub fn single(component: ComponentPredictive) -> Self {
        Self {
            weights: vec![1.0],
            components: vec![component],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[ComponentPredictive] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn mean(&self) -> f64 {
        mixture_mean(self)
    }

    pub fn variance(&self) -> f64 {
        mixture_variance(self)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        compensated_sum(
            self.weights
                .iter()
                .zip(&self.components)
                .filter(|(w, _)| **w > 0.0)
                .map(|(w, c)| w * c.cdf(x)),
        )
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let last = self
            .weights
            .iter()
            .rposition(|w| *w > 0.0)
            .unwrap_or(self.weights.len() - 1);
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc || i == last {
                return self.components[i].sample(rng);
            }
        }
        unreachable!("weights are non-empty")
    }
}

/// Checks that `weights` lie on the probability simplex.
pub fn check_simplex(weights: &[f64], tol: f64) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::InvalidWeights("empty weight vector".into()));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidWeights(format!(
            "weight {w} is negative or not finite"
        )));
    }
    let total = compensated_sum(weights.iter().copied());
    if (total - 1.0).abs() > tol {
        return Err(Error::InvalidWeights(format!(
            "weights sum to {total}, not 1"
        )));
    }
    Ok(())
}

/// Predictive mean `Σ wᵢμᵢ`.
pub fn mixture_mean(m: &PredictiveMixture) -> f64 {
    let means: Vec<f64> = m.components.iter().map(|c| c.mean).collect();
    weighted_mean(&means, &m.weights)
}

/// Predictive variance; always equal to the sum of [`two_term_decompose`].
pub fn mixture_variance(m: &PredictiveMixture) -> f64 {
    let (within, between) = two_term_decompose(m);
    within + between
}

/// `(E_V Var(Y|V), Var_V E(Y|V))` for the mixture, summed left to right.
pub fn two_term_decompose(m: &PredictiveMixture) -> (f64, f64) {
    let mu = mixture_mean(m);
    let within = compensated_sum(
        m.weights
            .iter()
            .zip(&m.components)
            .map(|(w, c)| w * c.variance),
    );
    let between = compensated_sum(m.weights.iter().zip(&m.components).map(|(w, c)| {
        let d = c.mean - mu;
        w * d * d
    }));
    (within, between)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::seed_stream;

    fn g(mu: f64, var: f64) -> ComponentPredictive {
        ComponentPredictive::gaussian(mu, var).unwrap()
    }

    #[test]
    fn single_component_moments() {
        let m = PredictiveMixture::new(vec![1.0], vec![g(3.0, 4.0)]).unwrap();
        assert_eq!(mixture_mean(&m), 3.0);
        assert_eq!(mixture_variance(&m), 4.0);
    }

    #[test]
    fn symmetric_means_cancel() {
        let m = PredictiveMixture::new(vec![0.5, 0.5], vec![g(-1.0, 1.0), g(1.0, 1.0)]).unwrap();
        assert_eq!(mixture_mean(&m), 0.0);
    }

    #[test]
    fn empty_mixture_is_rejected() {
        let err = PredictiveMixture::new(vec![], vec![]).unwrap_err();
        assert_eq!(err.to_string(), "empty mixture");
    }

    #[test]
    fn off_simplex_weights_are_rejected() {
        assert!(PredictiveMixture::new(vec![0.5, 0.6], vec![g(0.0, 1.0), g(1.0, 1.0)]).is_err());
        assert!(PredictiveMixture::new(vec![1.5, -0.5], vec![g(0.0, 1.0), g(1.0, 1.0)]).is_err());
    }

    // Monte Carlo oracle for the three-component mean 2.58.
    #[test]
    fn weighted_mean_matches_monte_carlo() {
        let m = PredictiveMixture::new(
            vec![0.74, 0.25, 0.01],
            vec![g(2.0, 1.0), g(4.0, 1.0), g(10.0, 1.0)],
        )
        .unwrap();
        assert!((mixture_mean(&m) - 2.58).abs() < 1e-12);
        let mut rng = seed_stream(11, 0);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| m.sample(&mut rng)).collect();
        let se = (sample_variance(&draws) / n as f64).sqrt();
        assert!((mean(&draws) - 2.58).abs() < 3.0 * se);
    }

    // 0.3·1 + 0.7·1 + 0.3·0.7·(2 − 0)² = 1.84, checked by simulation.
    #[test]
    fn variance_matches_monte_carlo() {
        let m = PredictiveMixture::new(vec![0.3, 0.7], vec![g(0.0, 1.0), g(2.0, 1.0)]).unwrap();
        assert!((mixture_variance(&m) - 1.84).abs() < 1e-12);
        let mut rng = seed_stream(12, 0);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| m.sample(&mut rng)).collect();
        let mu = mean(&draws);
        let m4 = draws.iter().map(|x| (x - mu).powi(4)).sum::<f64>() / n as f64;
        let v = sample_variance(&draws);
        let se = ((m4 - v * v) / n as f64).sqrt();
        assert!((v - 1.84).abs() < 3.0 * se, "v = {v}, se = {se}");
    }

    #[test]
    fn two_term_hand_expansion() {
        let m = PredictiveMixture::new(vec![0.5, 0.5], vec![g(0.0, 2.0), g(4.0, 2.0)]).unwrap();
        assert_eq!(two_term_decompose(&m), (2.0, 4.0));
        let equal = PredictiveMixture::new(vec![0.2, 0.8], vec![g(1.5, 2.0), g(1.5, 7.0)]).unwrap();
        assert_eq!(two_term_decompose(&equal).1, 0.0);
    }

    #[test]
    fn component_validation() {
        assert!(ComponentPredictive::gaussian(0.0, -1.0).is_err());
        assert!(ComponentPredictive::empirical(vec![1.0]).is_err());
        let b = ComponentPredictive::binomial_count(6, 0.25).unwrap();
        assert_eq!(b.mean(), 1.5);
        assert!((b.variance() - 1.125).abs() < 1e-15);
        assert!(ComponentPredictive::from_parts(
            1.6,
            1.125,
            Family::BinomialCount { trials: 6, p: 0.25 }
        )
        .is_err());
        let e = ComponentPredictive::empirical(vec![3.0, 1.0, 2.0]).unwrap();
        assert_eq!(e.mean(), 2.0);
        assert_eq!(e.variance(), 1.0);
    }

    #[test]
    fn component_json_round_trip() {
        let comps = vec![
            g(0.1, 1.0 / 3.0),
            ComponentPredictive::binomial_count(30, 0.3).unwrap(),
            ComponentPredictive::empirical(vec![0.5, -1.25, 7.0]).unwrap(),
        ];
        let text = serde_json::to_string(&comps).unwrap();
        let back: Vec<ComponentPredictive> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, comps);
    }

    #[test]
    fn cdf_per_family() {
        let n = g(0.0, 1.0);
        assert!((n.cdf(1.959963984540054) - 0.975).abs() < 1e-11);
        let b = ComponentPredictive::binomial_count(2, 0.5).unwrap();
        assert_eq!(b.cdf(-0.5), 0.0);
        assert!((b.cdf(0.0) - 0.25).abs() < 1e-12);
        assert!((b.cdf(1.5) - 0.75).abs() < 1e-12);
        assert_eq!(b.cdf(2.0), 1.0);
        let e = ComponentPredictive::empirical(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(e.cdf(2.5), 0.5);
    }
}
