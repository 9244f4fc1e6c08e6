//! Binomial GLMs fitted by IRLS (Fisher scoring with step halving).
//!
//! Covariates are centred and scaled internally; the reported coefficients and
//! covariance are on the original scale. The linear predictor is clamped to
//! `|η| ≤ 30` and fitted probabilities to `[1e-10, 1 − 1e-10]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};
use crate::mixture::ComponentPredictive;

use super::data::Dataset;

pub const MAX_IRLS_ITER: usize = 100;
/// Ridge penalty of the refit used when plain IRLS fails.
pub const FALLBACK_RIDGE: f64 = 1e-4;

const SCORE_TOL: f64 = 1e-8;
const ETA_CLAMP: f64 = 30.0;
const PROB_CLAMP: f64 = 1e-10;
const MAX_HALVINGS: usize = 40;
const SEPARATION_PROB: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Logit,
    Cloglog,
    Probit,
}

impl Link {
    /// Table order: logit, cloglog, probit.
    pub const ALL: [Link; 3] = [Link::Logit, Link::Cloglog, Link::Probit];

    pub fn name(self) -> &'static str {
        match self {
            Link::Logit => "logit",
            Link::Cloglog => "cloglog",
            Link::Probit => "probit",
        }
    }

    fn std_normal() -> Normal {
        Normal::new(0.0, 1.0).expect("standard normal")
    }

    /// Inverse link, unclamped.
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            Link::Logit => 1.0 / (1.0 + (-eta).exp()),
            Link::Cloglog => -(-eta.exp()).exp_m1(),
            Link::Probit => Self::std_normal().cdf(eta),
        }
    }

    /// dμ/dη.
    pub fn derivative(self, eta: f64) -> f64 {
        match self {
            Link::Logit => {
                let m = self.mean(eta);
                m * (1.0 - m)
            }
            Link::Cloglog => (eta - eta.exp()).exp(),
            Link::Probit => Self::std_normal().pdf(eta),
        }
    }

    pub fn link(self, mu: f64) -> f64 {
        match self {
            Link::Logit => (mu / (1.0 - mu)).ln(),
            Link::Cloglog => (-(-mu).ln_1p()).ln(),
            Link::Probit => Self::std_normal().inverse_cdf(mu),
        }
    }
}

impl std::fmt::Display for Link {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Link {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Link::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown link '{s}'")))
    }
}

/// One cell of a links × variable-sets grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlmSpec {
    pub link: Link,
    pub variables: Vec<usize>,
}

/// Cartesian product with links outer and variable sets inner.
pub fn model_grid(links: &[Link], sets: &[Vec<usize>]) -> Vec<GlmSpec> {
    links
        .iter()
        .flat_map(|&link| {
            sets.iter().map(move |v| GlmSpec {
                link,
                variables: v.clone(),
            })
        })
        .collect()
}

/// All subsets of `0..k`, ordered by size then lexicographically, with the
/// empty (intercept-only) set last.
pub fn table_order_subsets(k: usize) -> Vec<Vec<usize>> {
    let mut sets: Vec<Vec<usize>> = (1u64..(1 << k))
        .map(|mask| (0..k).filter(|j| mask >> j & 1 == 1).collect())
        .collect();
    sets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    sets.push(Vec::new());
    sets
}

#[derive(Clone, Debug)]
pub struct GlmFit {
    pub link: Link,
    pub variables: Vec<usize>,
    /// Intercept then one coefficient per entry of `variables`.
    pub beta: Vec<f64>,
    /// Inverse information of `beta` (penalized when a ridge was used).
    pub covariance: DMatrix<f64>,
    pub log_likelihood: f64,
    pub deviance: f64,
    pub iterations: usize,
    /// Ridge penalty applied, if the fit is a penalized one.
    pub ridge: Option<f64>,
    intercept_only_p: Option<f64>,
}

impl GlmFit {
    pub fn param_count(&self) -> usize {
        self.beta.len()
    }

    /// Linear predictor at a full feature row.
    pub fn eta(&self, x: &[f64]) -> f64 {
        self.beta[0]
            + self
                .variables
                .iter()
                .enumerate()
                .map(|(k, &j)| self.beta[k + 1] * x[j])
                .sum::<f64>()
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        if let Some(p) = self.intercept_only_p {
            return p;
        }
        clamp_prob(self.link.mean(self.eta(x).clamp(-ETA_CLAMP, ETA_CLAMP)))
    }

    /// Delta-method variance of the fitted probability.
    pub fn probability_variance(&self, x: &[f64]) -> f64 {
        let mut v = DVector::zeros(self.beta.len());
        v[0] = 1.0;
        for (k, &j) in self.variables.iter().enumerate() {
            v[k + 1] = x[j];
        }
        let var_eta = (v.transpose() * &self.covariance * &v)[0].max(0.0);
        let eta = self.eta(x).clamp(-ETA_CLAMP, ETA_CLAMP);
        let g = self.link.derivative(eta);
        g * g * var_eta
    }

    /// Binomial count predictive for a future unit with `trials` trials.
    pub fn count_predictive(&self, x: &[f64], trials: u32) -> Result<ComponentPredictive> {
        ComponentPredictive::binomial_count(trials, self.probability(x))
    }

    pub fn is_intercept_only(&self) -> bool {
        self.intercept_only_p.is_some()
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

struct Design {
    x: DMatrix<f64>,
    /// Maps scaled coefficients to original-scale ones.
    back: DMatrix<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
    lncomb: f64,
}

impl Design {
    fn new(d: &Dataset, variables: &[usize]) -> Result<Self> {
        let trials = d
            .trials()
            .ok_or_else(|| Error::InvalidDataset("binomial fit needs trial counts".into()))?;
        if let Some(&j) = variables.iter().find(|&&j| j >= d.p()) {
            return Err(Error::InvalidArgument(format!(
                "variable index {j} out of range for {} features",
                d.p()
            )));
        }
        let n = d.n();
        let k = variables.len();
        let mut x = DMatrix::from_element(n, k + 1, 1.0);
        let mut back = DMatrix::identity(k + 1, k + 1);
        for (c, &j) in variables.iter().enumerate() {
            let col = d.x().column(j);
            let mean = col.mean();
            let sd = (col.map(|v| (v - mean) * (v - mean)).sum() / n as f64).sqrt();
            let sd = if sd > 0.0 { sd } else { 1.0 };
            for i in 0..n {
                x[(i, c + 1)] = (col[i] - mean) / sd;
            }
            back[(c + 1, c + 1)] = 1.0 / sd;
            back[(0, c + 1)] = -mean / sd;
        }
        let y: Vec<f64> = d.y().iter().copied().collect();
        let m: Vec<f64> = trials.iter().map(|&t| t as f64).collect();
        let lncomb = trials
            .iter()
            .zip(&y)
            .map(|(&t, &yi)| ln_binomial(t as u64, yi as u64))
            .sum();
        Ok(Self {
            x,
            back,
            y,
            m,
            lncomb,
        })
    }

    fn probs(&self, link: Link, beta: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
        let eta = &self.x * beta;
        eta.iter()
            .map(|&e| {
                let e = e.clamp(-ETA_CLAMP, ETA_CLAMP);
                (clamp_prob(link.mean(e)), link.derivative(e).max(1e-300))
            })
            .unzip()
    }

    fn deviance(&self, mu: &[f64]) -> f64 {
        let mut dev = 0.0;
        for i in 0..mu.len() {
            let (y, m) = (self.y[i], self.m[i]);
            dev += xlogy(y, y / (m * mu[i])) + xlogy(m - y, (m - y) / (m * (1.0 - mu[i])));
        }
        2.0 * dev
    }

    fn log_likelihood(&self, mu: &[f64]) -> f64 {
        self.lncomb
            + (0..mu.len())
                .map(|i| xlogy(self.y[i], mu[i]) + xlogy(self.m[i] - self.y[i], 1.0 - mu[i]))
                .sum::<f64>()
    }
}

fn penalty_term(beta: &DVector<f64>, ridge: f64) -> f64 {
    ridge * beta.rows(1, beta.len() - 1).norm_squared()
}

/// Score, information and working quantities at `beta`.
fn score_info(
    des: &Design,
    mu: &[f64],
    dmu: &[f64],
    beta: &DVector<f64>,
    ridge: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let k = des.x.ncols();
    let mut score = DVector::zeros(k);
    let mut info = DMatrix::zeros(k, k);
    for i in 0..mu.len() {
        let v = mu[i] * (1.0 - mu[i]);
        let r = des.m[i] * (des.y[i] / des.m[i] - mu[i]) * dmu[i] / v;
        let w = des.m[i] * dmu[i] * dmu[i] / v;
        let row = des.x.row(i);
        for a in 0..k {
            score[a] += row[a] * r;
            for b in 0..=a {
                info[(a, b)] += w * row[a] * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            info[(b, a)] = info[(a, b)];
        }
    }
    for a in 1..k {
        score[a] -= ridge * beta[a];
        info[(a, a)] += ridge;
    }
    (score, info)
}

fn irls(d: &Dataset, link: Link, variables: &[usize], ridge: f64) -> Result<GlmFit> {
    let des = Design::new(d, variables)?;
    let total_y: f64 = des.y.iter().sum();
    let total_m: f64 = des.m.iter().sum();
    if variables.is_empty() {
        let p = total_y / total_m;
        let pc = clamp_prob(p);
        let eta = link.link(pc);
        let g = link.derivative(eta);
        let info = total_m * g * g / (pc * (1.0 - pc));
        let mu = vec![p; d.n()];
        return Ok(GlmFit {
            link,
            variables: Vec::new(),
            beta: vec![eta],
            covariance: DMatrix::from_element(1, 1, 1.0 / info),
            log_likelihood: des.log_likelihood(&mu),
            deviance: des.deviance(&mu),
            iterations: 0,
            ridge: None,
            intercept_only_p: Some(p),
        });
    }

    let k = variables.len() + 1;
    let mut beta = DVector::zeros(k);
    beta[0] = link.link(clamp_prob((total_y + 0.5) / (total_m + 1.0)));
    let (mut mu, mut dmu) = des.probs(link, &beta);
    let mut obj = des.deviance(&mu) + penalty_term(&beta, ridge);
    let mut trace = vec![obj];
    for iter in 1..=MAX_IRLS_ITER {
        let (score, info) = score_info(&des, &mu, &dmu, &beta, ridge);
        if score.amax() <= SCORE_TOL {
            // A vanishing score with fitted probabilities pinned at 0 or 1 is
            // separation, not convergence.
            if ridge == 0.0
                && mu
                    .iter()
                    .any(|&p| p <= SEPARATION_PROB || p >= 1.0 - SEPARATION_PROB)
            {
                return Err(Error::IrlsDiverged { trace });
            }
            let cov_scaled = info
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Singular("information matrix".into()))?
                .inverse();
            let covariance = &des.back * cov_scaled * des.back.transpose();
            let beta_orig = &des.back * &beta;
            return Ok(GlmFit {
                link,
                variables: variables.to_vec(),
                beta: beta_orig.iter().copied().collect(),
                covariance,
                log_likelihood: des.log_likelihood(&mu),
                deviance: des.deviance(&mu),
                iterations: iter - 1,
                ridge: (ridge > 0.0).then_some(ridge),
                intercept_only_p: None,
            });
        }
        let step = match info.cholesky() {
            Some(ch) => ch.solve(&score),
            None => return Err(Error::IrlsDiverged { trace }),
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let cand = &beta + &step * t;
            let (cmu, cdmu) = des.probs(link, &cand);
            let cobj = des.deviance(&cmu) + penalty_term(&cand, ridge);
            if cobj.is_finite() && cobj <= obj + 1e-12 * (1.0 + obj.abs()) {
                beta = cand;
                mu = cmu;
                dmu = cdmu;
                obj = cobj;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        trace.push(obj);
        if !accepted || beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::IrlsDiverged { trace });
        }
    }
    Err(Error::IrlsDiverged { trace })
}

/// Maximum-likelihood binomial GLM on the chosen columns. An empty
/// `variables` gives the intercept-only model with `p̂ = Σy / Σtrials`.
pub fn fit_glm_binomial(d: &Dataset, link: Link, variables: &[usize]) -> Result<GlmFit> {
    irls(d, link, variables, 0.0)
}

/// Ridge-penalized fit; the penalty applies to standardized slopes only.
pub fn fit_glm_binomial_penalized(
    d: &Dataset,
    link: Link,
    variables: &[usize],
    ridge: f64,
) -> Result<GlmFit> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidPenalty(format!("ridge penalty {ridge}")));
    }
    irls(d, link, variables, ridge)
}

/// Plain fit, or the `FALLBACK_RIDGE` refit when IRLS fails. The fallback is
/// visible through `GlmFit::ridge`.
pub fn fit_glm_with_fallback(d: &Dataset, link: Link, variables: &[usize]) -> Result<GlmFit> {
    match fit_glm_binomial(d, link, variables) {
        Ok(f) => Ok(f),
        Err(Error::IrlsDiverged { .. }) | Err(Error::Singular(_)) => {
            fit_glm_binomial_penalized(d, link, variables, FALLBACK_RIDGE)
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_data() -> Dataset {
        let x = DMatrix::from_column_slice(
            8,
            2,
            &[
                -2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, //
                1.0, 0.0, 2.0, 1.0, 0.0, 3.0, 1.0, 2.0,
            ],
        );
        let y = DVector::from_vec(vec![1.0, 1.0, 2.0, 3.0, 2.0, 5.0, 4.0, 6.0]);
        Dataset::binomial(x, y, vec![6; 8]).unwrap()
    }

    #[test]
    fn links_are_inverse_pairs() {
        for link in Link::ALL {
            for mu in [0.01, 0.2, 0.5, 0.77, 0.99] {
                assert!((link.mean(link.link(mu)) - mu).abs() < 1e-10);
            }
            let h = 1e-6;
            for eta in [-2.0, 0.0, 0.7] {
                let fd = (link.mean(eta + h) - link.mean(eta - h)) / (2.0 * h);
                assert!((fd - link.derivative(eta)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn intercept_only_is_pooled_proportion() {
        let d = grid_data();
        for link in Link::ALL {
            let f = fit_glm_binomial(&d, link, &[]).unwrap();
            assert_eq!(f.probability(&[0.0, 0.0]), 24.0 / 48.0);
        }
    }

    #[test]
    fn logit_matches_exact_newton() {
        let d = grid_data();
        let f = fit_glm_binomial(&d, Link::Logit, &[0]).unwrap();
        // Newton on the raw log-likelihood with the exact Hessian.
        let mut b = [0.0f64, 0.0];
        for _ in 0..50 {
            let (mut g0, mut g1, mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..8 {
                let x = d.x()[(i, 0)];
                let p = 1.0 / (1.0 + (-(b[0] + b[1] * x)).exp());
                let r = d.y()[i] - 6.0 * p;
                let w = 6.0 * p * (1.0 - p);
                g0 += r;
                g1 += r * x;
                h00 += w;
                h01 += w * x;
                h11 += w * x * x;
            }
            let det = h00 * h11 - h01 * h01;
            b[0] += (h11 * g0 - h01 * g1) / det;
            b[1] += (h00 * g1 - h01 * g0) / det;
        }
        assert!((f.beta[0] - b[0]).abs() < 1e-6);
        assert!((f.beta[1] - b[1]).abs() < 1e-6);
    }

    #[test]
    fn every_link_converges_on_two_covariates() {
        let d = grid_data();
        for link in Link::ALL {
            let f = fit_glm_binomial(&d, link, &[0, 1]).unwrap();
            assert!(f.iterations <= MAX_IRLS_ITER);
            assert!(f.ridge.is_none());
            let p = f.probability(&d.row(0));
            assert!(p > 0.0 && p < 1.0);
            assert!(f.probability_variance(&d.row(0)) > 0.0);
        }
    }

    #[test]
    fn separation_diverges_then_falls_back() {
        let x = DMatrix::from_column_slice(6, 1, &[-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]);
        let y = DVector::from_vec(vec![0.0, 0.0, 0.0, 4.0, 4.0, 4.0]);
        let d = Dataset::binomial(x, y, vec![4; 6]).unwrap();
        match fit_glm_binomial(&d, Link::Logit, &[0]) {
            Err(Error::IrlsDiverged { trace }) => {
                assert!(!trace.is_empty());
                assert!(trace
                    .windows(2)
                    .all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-12));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
        let f = fit_glm_with_fallback(&d, Link::Logit, &[0]).unwrap();
        assert_eq!(f.ridge, Some(FALLBACK_RIDGE));
        assert!(f.probability(&[3.0]) > 0.99);
    }

    #[test]
    fn grid_order() {
        let sets = table_order_subsets(3);
        assert_eq!(
            sets,
            vec![
                vec![0],
                vec![1],
                vec![2],
                vec![0, 1],
                vec![0, 2],
                vec![1, 2],
                vec![0, 1, 2],
                vec![]
            ]
        );
        let g = model_grid(&Link::ALL, &sets);
        assert_eq!(g.len(), 24);
        assert_eq!(g[0].link, Link::Logit);
        assert_eq!(g[8].link, Link::Cloglog);
        assert_eq!(g[15].variables, Vec::<usize>::new());
        assert_eq!(model_grid(&[Link::Probit], &[vec![1]]).len(), 1);
        let six = model_grid(&[Link::Logit, Link::Probit], &sets[..3]);
        let order: Vec<(Link, Vec<usize>)> =
            six.into_iter().map(|s| (s.link, s.variables)).collect();
        assert_eq!(
            order,
            vec![
                (Link::Logit, vec![0]),
                (Link::Logit, vec![1]),
                (Link::Logit, vec![2]),
                (Link::Probit, vec![0]),
                (Link::Probit, vec![1]),
                (Link::Probit, vec![2]),
            ]
        );
    }
}
