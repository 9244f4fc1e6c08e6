//! OLS and the elastic-net family.
//!
//! Features are centred and scaled to unit Euclidean norm before fitting and
//! the response is centred, so the intercept is never penalized. The
//! standardized objective is
//!
//! ```text
//! ½‖y_c − Zb‖² + Σ_j pf_j (l1·|b_j| + l2/2 · b_j²)
//! ```
//!
//! with `pf_j` the adaptive weights (all 1 for non-adaptive kinds). Lasso
//! has `l1 = λ`, ridge `l2 = λ` and is solved in closed form. The elastic
//! net uses `l1 = λα` and `l2 = λ(1 − α)/‖y_c‖`, which is what glmnet's
//! mixing means once it has scaled the response to unit variance; without
//! the `‖y_c‖` factor the ridge part swamps the L1 part whenever the
//! response is large. Everything but ridge uses cyclic coordinate descent
//! with an active-set inner loop.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::ComponentPredictive;
use crate::numeric::{sample_variance, seed_stream};

use super::data::Dataset;

const MAX_SWEEPS: usize = 100_000;
const MAX_REDRAWS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    Ols,
    Ridge,
    Lasso,
    Alasso,
    Enet,
    Aenet,
}

impl PenaltyKind {
    pub const ALL: [PenaltyKind; 6] = [
        PenaltyKind::Ols,
        PenaltyKind::Ridge,
        PenaltyKind::Lasso,
        PenaltyKind::Alasso,
        PenaltyKind::Enet,
        PenaltyKind::Aenet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PenaltyKind::Ols => "ols",
            PenaltyKind::Ridge => "ridge",
            PenaltyKind::Lasso => "lasso",
            PenaltyKind::Alasso => "alasso",
            PenaltyKind::Enet => "enet",
            PenaltyKind::Aenet => "aenet",
        }
    }

    pub fn is_adaptive(self) -> bool {
        matches!(self, PenaltyKind::Alasso | PenaltyKind::Aenet)
    }

    /// Whether the penalty has an L1 part (and so selects variables).
    pub fn selects(self) -> bool {
        matches!(
            self,
            PenaltyKind::Lasso | PenaltyKind::Alasso | PenaltyKind::Enet | PenaltyKind::Aenet
        )
    }
}

impl std::fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PenaltyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidPenalty(format!("unknown penalty kind '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    #[serde(default)]
    pub lambda: f64,
    /// Elastic-net mixing; only read for `enet` and `aenet`.
    #[serde(default = "default_mixing")]
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adaptive_weights: Option<Vec<f64>>,
}

fn default_mixing() -> f64 {
    0.5
}

impl PenaltySpec {
    pub fn ols() -> Self {
        Self::new(PenaltyKind::Ols, 0.0)
    }

    pub fn ridge(lambda: f64) -> Self {
        Self::new(PenaltyKind::Ridge, lambda)
    }

    pub fn lasso(lambda: f64) -> Self {
        Self::new(PenaltyKind::Lasso, lambda)
    }

    pub fn enet(lambda: f64, alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::new(PenaltyKind::Enet, lambda)
        }
    }

    pub fn alasso(lambda: f64, weights: Vec<f64>) -> Self {
        Self {
            adaptive_weights: Some(weights),
            ..Self::new(PenaltyKind::Alasso, lambda)
        }
    }

    pub fn aenet(lambda: f64, alpha: f64, weights: Vec<f64>) -> Self {
        Self {
            alpha,
            adaptive_weights: Some(weights),
            ..Self::new(PenaltyKind::Aenet, lambda)
        }
    }

    pub fn new(kind: PenaltyKind, lambda: f64) -> Self {
        Self {
            kind,
            lambda,
            alpha: default_mixing(),
            adaptive_weights: None,
        }
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self {
            lambda,
            ..self.clone()
        }
    }

    /// Effective L1 share of the penalty.
    pub fn mixing(&self) -> f64 {
        match self.kind {
            PenaltyKind::Ols | PenaltyKind::Ridge => 0.0,
            PenaltyKind::Lasso | PenaltyKind::Alasso => 1.0,
            PenaltyKind::Enet | PenaltyKind::Aenet => self.alpha,
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidPenalty(format!(
                "lambda must be a finite value >= 0, got {}",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidPenalty(format!(
                "mixing alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        match (&self.adaptive_weights, self.kind.is_adaptive()) {
            (Some(w), true) => {
                if w.len() != p {
                    return Err(Error::InvalidPenalty(format!(
                        "{} adaptive weights for {} features",
                        w.len(),
                        p
                    )));
                }
                if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(Error::InvalidPenalty(
                        "adaptive weights must be positive and finite".into(),
                    ));
                }
            }
            (None, true) => {
                return Err(Error::InvalidPenalty(format!(
                    "{} requires adaptive weights",
                    self.kind
                )))
            }
            _ => {}
        }
        Ok(())
    }

    fn penalty_factors(&self, p: usize) -> Vec<f64> {
        match (&self.adaptive_weights, self.kind.is_adaptive()) {
            (Some(w), true) => w.clone(),
            _ => vec![1.0; p],
        }
    }
}

/// A fitted linear predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub kind: PenaltyKind,
    pub lambda: f64,
    beta: Vec<f64>,
    support: Vec<usize>,
    sigma2: Option<f64>,
    #[serde(skip)]
    objective_trace: Vec<f64>,
}

impl FittedModel {
    /// Coefficients on the original scale, intercept first.
    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn intercept(&self) -> f64 {
        self.beta[0]
    }

    /// Zero-based indices of the features with nonzero coefficient.
    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn sigma2(&self) -> Option<f64> {
        self.sigma2
    }

    pub fn with_sigma2(mut self, sigma2: f64) -> Self {
        self.sigma2 = Some(sigma2);
        self
    }

    /// Standardized objective after each coordinate-descent sweep (empty for
    /// closed-form fits).
    pub fn objective_trace(&self) -> &[f64] {
        &self.objective_trace
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.beta[0]
            + self.beta[1..]
                .iter()
                .zip(x)
                .map(|(b, v)| b * v)
                .sum::<f64>()
    }

    /// Gaussian predictive `N(xᵀβ̂, σ̂² + prediction_variance)`.
    pub fn predictive(&self, x: &[f64], prediction_variance: f64) -> Result<ComponentPredictive> {
        let s2 = self.sigma2.ok_or_else(|| {
            Error::InvalidArgument("model has no residual variance estimate".into())
        })?;
        ComponentPredictive::gaussian(self.predict(x), s2 + prediction_variance)
    }
}

pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Centred and unit-norm scaled copy of a dataset.
pub(crate) struct Standardized {
    pub z: DMatrix<f64>,
    pub yc: DVector<f64>,
    pub x_mean: Vec<f64>,
    /// Column norms after centring; zero marks a constant column.
    pub x_scale: Vec<f64>,
    pub y_mean: f64,
}

impl Standardized {
    pub fn new(d: &Dataset) -> Self {
        let (n, p) = (d.n(), d.p());
        let mut z = d.x().clone();
        let mut x_mean = vec![0.0; p];
        let mut x_scale = vec![0.0; p];
        for j in 0..p {
            let mut col = z.column_mut(j);
            let m = col.sum() / n as f64;
            col.add_scalar_mut(-m);
            let s = col.norm();
            let tiny = 1e-10 * (1.0 + m.abs()) * (n as f64).sqrt();
            if s > tiny {
                col /= s;
                x_scale[j] = s;
            } else {
                col.fill(0.0);
            }
            x_mean[j] = m;
        }
        let y_mean = d.y().sum() / n as f64;
        let yc = d.y().add_scalar(-y_mean);
        Self {
            z,
            yc,
            x_mean,
            x_scale,
            y_mean,
        }
    }

    fn usable(&self) -> Vec<bool> {
        self.x_scale.iter().map(|s| *s > 0.0).collect()
    }

    fn unscale(&self, b: &[f64]) -> Vec<f64> {
        let mut beta = Vec::with_capacity(b.len() + 1);
        let mut icpt = self.y_mean;
        beta.push(0.0);
        for j in 0..b.len() {
            let bj = if self.x_scale[j] > 0.0 {
                b[j] / self.x_scale[j]
            } else {
                0.0
            };
            icpt -= bj * self.x_mean[j];
            beta.push(bj);
        }
        beta[0] = icpt;
        beta
    }

    fn scale(&self, beta: &[f64]) -> Vec<f64> {
        beta[1..]
            .iter()
            .zip(&self.x_scale)
            .map(|(b, s)| b * s)
            .collect()
    }

    fn residual(&self, b: &[f64]) -> DVector<f64> {
        &self.yc - &self.z * DVector::from_column_slice(b)
    }

    /// Largest λ with an all-zero solution; the mixing is floored at 1e-3 so
    /// ridge still gets a finite path start.
    pub fn lambda_max(&self, mixing: f64, pf: &[f64]) -> f64 {
        let zty = self.z.tr_mul(&self.yc);
        let a = mixing.max(1e-3);
        let usable = self.usable();
        (0..zty.len())
            .filter(|&j| usable[j])
            .map(|j| zty[j].abs() / (a * pf[j]))
            .fold(0.0, f64::max)
    }
}

/// Per-unit L1 and L2 weights of a spec on standardized data.
#[derive(Clone, Copy, Debug)]
struct Weights {
    l1: f64,
    l2: f64,
}

impl Weights {
    fn new(s: &Standardized, kind: PenaltyKind, lambda: f64, mixing: f64) -> Self {
        let l2 = lambda * (1.0 - mixing);
        let l2 = match kind {
            PenaltyKind::Enet | PenaltyKind::Aenet => {
                let yn = s.yc.norm();
                if yn > 0.0 {
                    l2 / yn
                } else {
                    l2
                }
            }
            _ => l2,
        };
        Self {
            l1: lambda * mixing,
            l2,
        }
    }
}

fn objective(s: &Standardized, b: &[f64], w: Weights, pf: &[f64]) -> f64 {
    let r = s.residual(b);
    let pen: f64 = b
        .iter()
        .zip(pf)
        .map(|(bj, f)| f * (w.l1 * bj.abs() + 0.5 * w.l2 * bj * bj))
        .sum();
    0.5 * r.norm_squared() + pen
}

/// Value of the standardized objective at original-scale coefficients.
pub fn penalized_objective(d: &Dataset, spec: &PenaltySpec, beta: &[f64]) -> f64 {
    let s = Standardized::new(d);
    let b = s.scale(beta);
    let w = Weights::new(&s, spec.kind, spec.lambda, spec.mixing());
    objective(&s, &b, w, &spec.penalty_factors(d.p()))
}

/// Largest per-coordinate violation of the optimality conditions of the
/// standardized objective.
pub fn kkt_residual(d: &Dataset, spec: &PenaltySpec, model: &FittedModel) -> f64 {
    let s = Standardized::new(d);
    let b = s.scale(model.beta());
    let r = s.residual(&b);
    let g = s.z.tr_mul(&r);
    let pf = spec.penalty_factors(d.p());
    let w = Weights::new(&s, spec.kind, spec.lambda, spec.mixing());
    let mut worst: f64 = 0.0;
    for j in 0..b.len() {
        if s.x_scale[j] == 0.0 {
            continue;
        }
        let l1 = w.l1 * pf[j];
        let l2 = w.l2 * pf[j];
        let v = if b[j] != 0.0 {
            (g[j] - l2 * b[j] - l1 * b[j].signum()).abs()
        } else {
            (g[j].abs() - l1).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

struct Solver<'a> {
    s: &'a Standardized,
    w: Weights,
    pf: &'a [f64],
    usable: Vec<bool>,
}

impl Solver<'_> {
    fn update(&self, j: usize, b: &mut [f64], r: &mut DVector<f64>) -> f64 {
        let n = self.s.z.nrows();
        let col = &self.s.z.as_slice()[j * n..(j + 1) * n];
        let rs = r.as_mut_slice();
        let rho: f64 = col.iter().zip(rs.iter()).map(|(a, b)| a * b).sum::<f64>() + b[j];
        let new = soft_threshold(rho, self.w.l1 * self.pf[j]) / (1.0 + self.w.l2 * self.pf[j]);
        let delta = new - b[j];
        if delta != 0.0 {
            for (ri, zi) in rs.iter_mut().zip(col) {
                *ri -= delta * zi;
            }
            b[j] = new;
        }
        delta.abs()
    }

    /// Runs to convergence from `b`; `trace` collects the objective after
    /// every sweep when supplied.
    fn solve(&self, b: &mut [f64], mut trace: Option<&mut Vec<f64>>) {
        let p = b.len();
        let mut r = self.s.residual(b);
        let tol = 1e-13 * self.s.yc.norm().max(1.0);
        let mut sweeps = 0;
        let record = |b: &[f64], trace: &mut Option<&mut Vec<f64>>| {
            if let Some(t) = trace.as_deref_mut() {
                t.push(objective(self.s, b, self.w, self.pf));
            }
        };
        while sweeps < MAX_SWEEPS {
            let mut change: f64 = 0.0;
            for j in 0..p {
                if self.usable[j] {
                    change = change.max(self.update(j, b, &mut r));
                }
            }
            sweeps += 1;
            record(b, &mut trace);
            if change <= tol {
                break;
            }
            let active: Vec<usize> = (0..p).filter(|&j| b[j] != 0.0).collect();
            while sweeps < MAX_SWEEPS {
                let mut c: f64 = 0.0;
                for &j in &active {
                    c = c.max(self.update(j, b, &mut r));
                }
                sweeps += 1;
                record(b, &mut trace);
                if c <= tol {
                    break;
                }
            }
        }
    }
}

/// Ridge solutions `(ZᵀZ + λI)⁻¹Zᵀy_c` for several λ from one SVD of the
/// usable columns.
fn ridge_path(s: &Standardized, lambdas: &[f64]) -> Result<Vec<Vec<f64>>> {
    let p = s.z.ncols();
    let cols: Vec<usize> = (0..p).filter(|&j| s.x_scale[j] > 0.0).collect();
    let zu = s.z.select_columns(cols.iter());
    let svd = zu.svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let uty = u.tr_mul(&s.yc);
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|sv| **sv > 1e-12 * smax.max(1.0))
        .count();
    let mut out = Vec::with_capacity(lambdas.len());
    for &lam in lambdas {
        if lam == 0.0 && rank < cols.len() {
            return Err(Error::Singular(
                "ridge with lambda = 0 on a rank-deficient design".into(),
            ));
        }
        let mut coef = DVector::zeros(cols.len());
        for (k, sv) in svd.singular_values.iter().enumerate() {
            let denom = sv * sv + lam;
            if denom > 0.0 && *sv > 0.0 {
                let f = sv * uty[k] / denom;
                coef.axpy(f, &vt.row(k).transpose(), 1.0);
            }
        }
        let mut b = vec![0.0; p];
        for (k, &j) in cols.iter().enumerate() {
            b[j] = coef[k];
        }
        out.push(b);
    }
    Ok(out)
}

fn ols(d: &Dataset) -> Result<FittedModel> {
    let (n, p) = (d.n(), d.p());
    if p >= n {
        return Err(Error::OlsUnderdetermined { n, p });
    }
    let beta = least_squares(d, &(0..p).collect::<Vec<_>>(), true)?;
    let mut full = vec![0.0; p + 1];
    full[0] = beta[0];
    full[1..].copy_from_slice(&beta[1..]);
    Ok(FittedModel {
        kind: PenaltyKind::Ols,
        lambda: 0.0,
        beta: full,
        support: (0..p).collect(),
        sigma2: None,
        objective_trace: Vec::new(),
    })
}

/// Least squares of y on `[1, X_cols]`. With `strict`, rank deficiency is an
/// error; otherwise the minimum-norm solution is returned.
fn least_squares(d: &Dataset, cols: &[usize], strict: bool) -> Result<Vec<f64>> {
    let n = d.n();
    let mut a = DMatrix::from_element(n, cols.len() + 1, 1.0);
    for (k, &j) in cols.iter().enumerate() {
        a.set_column(k + 1, &d.x().column(j));
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let eps = 1e-12 * smax.max(1.0) * (n.max(cols.len() + 1) as f64);
    if strict && svd.singular_values.min() <= eps {
        return Err(Error::Singular("design matrix is rank deficient".into()));
    }
    let sol = svd
        .solve(d.y(), eps)
        .map_err(|e| Error::Singular(e.to_string()))?;
    Ok(sol.iter().copied().collect())
}

fn build(s: &Standardized, spec: &PenaltySpec, b: &[f64], trace: Vec<f64>) -> FittedModel {
    let support = (0..b.len())
        .filter(|&j| b[j] != 0.0 && s.x_scale[j] > 0.0)
        .collect();
    FittedModel {
        kind: spec.kind,
        lambda: spec.lambda,
        beta: s.unscale(b),
        support,
        sigma2: None,
        objective_trace: trace,
    }
}

pub fn fit_penalized(d: &Dataset, spec: &PenaltySpec) -> Result<FittedModel> {
    spec.validate(d.p())?;
    if spec.kind == PenaltyKind::Ols {
        return ols(d);
    }
    let s = Standardized::new(d);
    if spec.kind == PenaltyKind::Ridge {
        let b = ridge_path(&s, &[spec.lambda])?.pop().expect("one lambda");
        return Ok(build(&s, spec, &b, Vec::new()));
    }
    let pf = spec.penalty_factors(d.p());
    let w = Weights::new(&s, spec.kind, spec.lambda, spec.mixing());
    let solver = Solver {
        s: &s,
        w,
        pf: &pf,
        usable: s.usable(),
    };
    let mut b = vec![0.0; d.p()];
    let mut trace = vec![objective(&s, &b, w, &pf)];
    solver.solve(&mut b, Some(&mut trace));
    Ok(build(&s, spec, &b, trace))
}

/// Fits along a decreasing λ grid with warm starts.
pub(crate) fn fit_path(
    d: &Dataset,
    spec: &PenaltySpec,
    lambdas: &[f64],
) -> Result<Vec<FittedModel>> {
    spec.validate(d.p())?;
    let s = Standardized::new(d);
    match spec.kind {
        PenaltyKind::Ols => Err(Error::InvalidPenalty("OLS has no lambda path".into())),
        PenaltyKind::Ridge => Ok(ridge_path(&s, lambdas)?
            .iter()
            .zip(lambdas)
            .map(|(b, &l)| build(&s, &spec.with_lambda(l), b, Vec::new()))
            .collect()),
        _ => {
            let pf = spec.penalty_factors(d.p());
            let usable = s.usable();
            let mut b = vec![0.0; d.p()];
            let mut out = Vec::with_capacity(lambdas.len());
            for &lam in lambdas {
                let solver = Solver {
                    s: &s,
                    w: Weights::new(&s, spec.kind, lam, spec.mixing()),
                    pf: &pf,
                    usable: usable.clone(),
                };
                solver.solve(&mut b, None);
                out.push(build(&s, &spec.with_lambda(lam), &b, Vec::new()));
            }
            Ok(out)
        }
    }
}

/// Default adaptive weights `1/|b̂_ridge|` on the standardized scale,
/// normalized to mean 1. Constant columns get weight 1 (they never enter).
pub fn adaptive_weights_from_ridge(d: &Dataset, lambda: f64) -> Result<Vec<f64>> {
    let s = Standardized::new(d);
    let b = ridge_path(&s, &[lambda])?.pop().expect("one lambda");
    let mut w: Vec<f64> = b
        .iter()
        .zip(&s.x_scale)
        .map(|(bj, sc)| if *sc > 0.0 { 1.0 / bj.abs() } else { f64::NAN })
        .collect();
    let finite: Vec<f64> = w.iter().copied().filter(|v| v.is_finite()).collect();
    let m = if finite.is_empty() {
        1.0
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    for v in &mut w {
        *v = if v.is_finite() {
            (*v / m).max(1e-300)
        } else {
            1.0
        };
    }
    Ok(w)
}

/// `RSS/(n − |S| − 1)` from an OLS refit on the model's support.
///
/// Ridge keeps every column, so callers wanting a sparse estimate for ridge
/// pass an elastic-net fit here instead.
pub fn estimate_sigma2(d: &Dataset, m: &FittedModel) -> Result<f64> {
    let k = m.support().len();
    let n = d.n();
    if k + 1 >= n {
        return Err(Error::SaturatedSupport { support: k, n });
    }
    let beta = least_squares(d, m.support(), false)?;
    let mut rss = 0.0;
    for i in 0..n {
        let mut fit = beta[0];
        for (c, &j) in m.support().iter().enumerate() {
            fit += beta[c + 1] * d.x()[(i, j)];
        }
        let e = d.y()[i] - fit;
        rss += e * e;
    }
    Ok(rss / (n - k - 1) as f64)
}

/// Sample variance of `x_newᵀβ̂` over `b` case-resampled refits at the fixed
/// penalty. A resample whose fit fails is redrawn from the same stream.
pub fn bootstrap_pred_variance(
    d: &Dataset,
    spec: &PenaltySpec,
    x_new: &[f64],
    b: usize,
    seed: u64,
) -> Result<f64> {
    spec.validate(d.p())?;
    bootstrap_pred_variance_with(d, x_new, b, seed, |r| fit_penalized(r, spec))
}

/// As [`bootstrap_pred_variance`] with an arbitrary refit on each resample.
pub fn bootstrap_pred_variance_with<F>(
    d: &Dataset,
    x_new: &[f64],
    b: usize,
    seed: u64,
    fit: F,
) -> Result<f64>
where
    F: Fn(&Dataset) -> Result<FittedModel> + Sync,
{
    if b < 50 {
        return Err(Error::InvalidArgument(format!(
            "bootstrap size {b} below the minimum of 50"
        )));
    }
    if x_new.len() != d.p() {
        return Err(Error::Dimension(format!(
            "x_new has {} entries for {} features",
            x_new.len(),
            d.p()
        )));
    }
    let n = d.n();
    let preds: Result<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed_stream(seed, i as u64);
            let mut log = Vec::new();
            for _ in 0..=MAX_REDRAWS {
                let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                match fit(&d.select_rows(&rows)) {
                    Ok(m) => return Ok(m.predict(x_new)),
                    Err(e) => log.push(e.to_string()),
                }
            }
            Err(Error::ReplicateFailed {
                index: i,
                attempts: log.len(),
                log: log.join("; "),
            })
        })
        .collect();
    Ok(sample_variance(&preds?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_data(n: usize, p: usize, noise: f64, seed: u64) -> (Dataset, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
        let beta: Vec<f64> = (0..p)
            .map(|j| if j < 3 { 1.0 + j as f64 } else { 0.0 })
            .collect();
        let y = DVector::from_fn(n, |i, _| {
            let e: f64 = StandardNormal.sample(&mut rng);
            1.5 + (0..p).map(|j| x[(i, j)] * beta[j]).sum::<f64>() + noise * e
        });
        (Dataset::new(x, y).unwrap(), beta)
    }

    /// Independent standardization used by the oracles below.
    fn standardize(d: &Dataset) -> (DMatrix<f64>, DVector<f64>) {
        let n = d.n() as f64;
        let mut z = d.x().clone();
        for mut c in z.column_iter_mut() {
            let m = c.mean();
            c.add_scalar_mut(-m);
            let s = c.norm();
            c /= s;
        }
        let ym = d.y().sum() / n;
        (z, d.y().add_scalar(-ym))
    }

    #[test]
    fn lasso_without_penalty_is_ols() {
        let (d, _) = random_data(40, 5, 0.5, 1);
        let lasso = fit_penalized(&d, &PenaltySpec::lasso(0.0)).unwrap();
        let ols = fit_penalized(&d, &PenaltySpec::ols()).unwrap();
        for (a, b) in lasso.beta().iter().zip(ols.beta()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn ridge_matches_normal_equations() {
        let (d, _) = random_data(30, 8, 1.0, 2);
        let lam = 0.7;
        let m = fit_penalized(&d, &PenaltySpec::ridge(lam)).unwrap();
        let (z, yc) = standardize(&d);
        let lhs = z.tr_mul(&z) + DMatrix::identity(8, 8) * lam;
        let b = lhs.lu().solve(&z.tr_mul(&yc)).unwrap();
        let got = Standardized::new(&d).scale(m.beta());
        for j in 0..8 {
            assert!((got[j] - b[j]).abs() < 1e-10);
        }
        assert!(kkt_residual(&d, &PenaltySpec::ridge(lam), &m) < 1e-7);
    }

    #[test]
    fn orthonormal_design_soft_thresholds() {
        // Columns already centred with unit norm, so the standardized problem
        // is the raw one and the lasso solution is soft(zᵀy, λ).
        let x = DMatrix::from_row_slice(4, 2, &[0.5, 0.5, 0.5, -0.5, -0.5, 0.5, -0.5, -0.5]);
        let y = DVector::from_vec(vec![3.0, 1.0, 0.5, -1.5]);
        let d = Dataset::new(x.clone(), y.clone()).unwrap();
        let yc = y.add_scalar(-y.mean());
        for lam in [0.0, 0.3, 1.0, 2.0, 5.0] {
            let m = fit_penalized(&d, &PenaltySpec::lasso(lam)).unwrap();
            for j in 0..2 {
                let zs: f64 = x.column(j).dot(&yc);
                let expect = zs.signum() * (zs.abs() - lam).max(0.0);
                assert!((m.beta()[j + 1] - expect).abs() < 1e-12);
            }
            let pf = vec![2.0, 0.5];
            let m = fit_penalized(&d, &PenaltySpec::alasso(lam, pf.clone())).unwrap();
            for j in 0..2 {
                let zs: f64 = x.column(j).dot(&yc);
                let expect = soft_threshold(zs, lam * pf[j]);
                assert!((m.beta()[j + 1] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kkt_and_sparsity_for_l1_kinds() {
        let (d, _) = random_data(30, 60, 1.0, 3);
        let w = adaptive_weights_from_ridge(&d, 1.0).unwrap();
        let specs = [
            PenaltySpec::lasso(0.5),
            PenaltySpec::enet(0.5, 0.5),
            PenaltySpec::alasso(0.5, w.clone()),
            PenaltySpec::aenet(0.5, 0.3, w),
        ];
        for spec in specs {
            let m = fit_penalized(&d, &spec).unwrap();
            assert!(kkt_residual(&d, &spec, &m) < 1e-7, "{:?}", spec.kind);
            for j in 0..60 {
                if !m.support().contains(&j) {
                    assert_eq!(m.beta()[j + 1], 0.0);
                }
            }
            let t = m.objective_trace();
            assert!(t.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs()));
        }
    }

    #[test]
    fn unit_adaptive_weights_match_plain_kinds() {
        let (d, _) = random_data(30, 10, 1.0, 4);
        let ones = vec![1.0; 10];
        let a = fit_penalized(&d, &PenaltySpec::lasso(0.4)).unwrap();
        let b = fit_penalized(&d, &PenaltySpec::alasso(0.4, ones.clone())).unwrap();
        let c = fit_penalized(&d, &PenaltySpec::enet(0.4, 0.6)).unwrap();
        let e = fit_penalized(&d, &PenaltySpec::aenet(0.4, 0.6, ones)).unwrap();
        for j in 0..11 {
            assert!((a.beta()[j] - b.beta()[j]).abs() < 1e-9);
            assert!((c.beta()[j] - e.beta()[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn error_cases() {
        let (d, _) = random_data(5, 6, 1.0, 5);
        assert!(matches!(
            fit_penalized(&d, &PenaltySpec::ols()),
            Err(Error::OlsUnderdetermined { n: 5, p: 6 })
        ));
        assert!(matches!(
            fit_penalized(&d, &PenaltySpec::lasso(-1.0)),
            Err(Error::InvalidPenalty(_))
        ));
        assert!(fit_penalized(&d, &PenaltySpec::enet(1.0, 1.5)).is_err());
        assert!(fit_penalized(&d, &PenaltySpec::new(PenaltyKind::Alasso, 1.0)).is_err());
    }

    #[test]
    fn sigma2_zero_noise_and_textbook() {
        let (d, _) = random_data(30, 5, 0.0, 6);
        let m = fit_penalized(&d, &PenaltySpec::ols()).unwrap();
        assert!(estimate_sigma2(&d, &m).unwrap().abs() < 1e-10);

        let (d, _) = random_data(30, 5, 1.0, 7);
        let m = fit_penalized(&d, &PenaltySpec::ols()).unwrap();
        let mut a = DMatrix::from_element(30, 6, 1.0);
        for j in 0..5 {
            a.set_column(j + 1, &d.x().column(j));
        }
        let bhat = (a.tr_mul(&a)).lu().solve(&a.tr_mul(d.y())).unwrap();
        let rss = (d.y() - &a * bhat).norm_squared();
        let s2 = estimate_sigma2(&d, &m).unwrap();
        assert!((s2 - rss / 24.0).abs() < 1e-10 * s2);
    }

    #[test]
    fn saturated_support_is_rejected() {
        let (d, _) = random_data(6, 5, 1.0, 8);
        let m = fit_penalized(&d, &PenaltySpec::ols()).unwrap();
        assert!(matches!(
            estimate_sigma2(&d, &m),
            Err(Error::SaturatedSupport { support: 5, n: 6 })
        ));
    }

    #[test]
    fn bootstrap_variance_properties() {
        let (d, _) = random_data(200, 2, 0.0, 9);
        let v = bootstrap_pred_variance(&d, &PenaltySpec::ols(), &[0.3, -1.0], 60, 1).unwrap();
        assert!(v <= 1e-6);

        let (d, _) = random_data(40, 3, 1.0, 10);
        let spec = PenaltySpec::lasso(0.2);
        let a = bootstrap_pred_variance(&d, &spec, &[0.1, 0.2, 0.3], 50, 42).unwrap();
        let b = bootstrap_pred_variance(&d, &spec, &[0.1, 0.2, 0.3], 50, 42).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(bootstrap_pred_variance(&d, &spec, &[0.1, 0.2, 0.3], 49, 42).is_err());
    }

    #[test]
    fn bootstrap_matches_analytic_ols_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100;
        let x = DMatrix::from_fn(n, 1, |_, _| StandardNormal.sample(&mut rng));
        let y = DVector::from_fn(n, |i, _| {
            let e: f64 = StandardNormal.sample(&mut rng);
            2.0 + 0.5 * x[(i, 0)] + e
        });
        let d = Dataset::new(x.clone(), y).unwrap();
        let x0 = [1.5];
        let mut a = DMatrix::from_element(n, 2, 1.0);
        a.set_column(1, &x.column(0));
        let inv = a.tr_mul(&a).try_inverse().unwrap();
        let v0 = DVector::from_vec(vec![1.0, x0[0]]);
        let analytic = (v0.transpose() * inv * &v0)[0];
        let boot = bootstrap_pred_variance(&d, &PenaltySpec::ols(), &x0, 1000, 3).unwrap();
        assert!((boot / analytic - 1.0).abs() < 0.25, "{boot} vs {analytic}");
    }

    #[test]
    fn constant_column_gets_zero_coefficient() {
        let (d, _) = random_data(20, 3, 1.0, 12);
        let mut x = d.x().clone();
        x.column_mut(1).fill(4.0);
        let d = Dataset::new(x, d.y().clone()).unwrap();
        let m = fit_penalized(&d, &PenaltySpec::lasso(0.01)).unwrap();
        assert_eq!(m.beta()[2], 0.0);
        assert!(!m.support().contains(&1));
    }

    #[test]
    fn enet_scales_with_the_response() {
        // l2 carries 1/‖y_c‖, so y → c·y with λ → c·λ scales the fit by c.
        let (d, _) = random_data(30, 8, 0.5, 11);
        let c = 7.5;
        let dy = Dataset::new(d.x().clone(), d.y() * c).unwrap();
        for spec in [PenaltySpec::enet(0.8, 0.5), PenaltySpec::enet(0.2, 0.1)] {
            let a = fit_penalized(&d, &spec).unwrap();
            let b = fit_penalized(&dy, &spec.with_lambda(spec.lambda * c)).unwrap();
            for (x, y) in a.beta().iter().zip(b.beta()) {
                assert!((x * c - y).abs() < 1e-8 * (1.0 + y.abs()), "{x} {y}");
            }
            assert!(kkt_residual(&dy, &spec.with_lambda(spec.lambda * c), &b) < 1e-7);
        }
    }

    #[test]
    fn enet_with_mixing_one_is_lasso() {
        let (d, _) = random_data(30, 8, 0.5, 12);
        let a = fit_penalized(&d, &PenaltySpec::enet(0.3, 1.0)).unwrap();
        let b = fit_penalized(&d, &PenaltySpec::lasso(0.3)).unwrap();
        for (x, y) in a.beta().iter().zip(b.beta()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
