//! Model weights: stacking over out-of-fold predictions, BIC-approximate
//! posterior weights, and marginal variable-set importance.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{assign_folds, fit_penalized, Dataset, PenaltySpec};

/// Tolerance on the sum of a returned weight vector.
pub const WEIGHT_TOL: f64 = 1e-10;

const QP_MAX_ITER: usize = 100_000;
const QP_KKT_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMethod {
    Stacking,
    BicPosterior,
    Uniform,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub method: WeightMethod,
}

impl WeightVector {
    pub fn new(weights: Vec<f64>, method: WeightMethod) -> Result<Self> {
        check_weights(&weights)?;
        Ok(Self { weights, method })
    }

    pub fn uniform(q: usize) -> Result<Self> {
        if q == 0 {
            return Err(Error::InvalidWeights("no models".into()));
        }
        Ok(Self {
            weights: vec![1.0 / q as f64; q],
            method: WeightMethod::Uniform,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn check_weights(w: &[f64]) -> Result<()> {
    if w.is_empty() {
        return Err(Error::InvalidWeights("empty weight vector".into()));
    }
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidWeights(
            "negative or non-finite weight".into(),
        ));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::InvalidWeights(format!("weights sum to {s}")));
    }
    Ok(())
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        cum += uk;
        let t = (cum - 1.0) / (k + 1) as f64;
        if uk - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Quadratic `wᵀQw − 2cᵀw` scaled so its largest coefficient is about 1.
struct Qp {
    q: DMatrix<f64>,
    c: DVector<f64>,
}

impl Qp {
    fn new(preds: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        let q = preds.tr_mul(preds);
        let c = preds.tr_mul(y);
        let scale = q.amax().max(c.amax());
        let scale = if scale > 0.0 { scale } else { 1.0 };
        Self {
            q: q / scale,
            c: c / scale,
        }
    }

    fn value(&self, w: &DVector<f64>) -> f64 {
        w.dot(&(&self.q * w)) - 2.0 * self.c.dot(w)
    }

    fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        (&self.q * w - &self.c) * 2.0
    }

    /// Largest violation of stationarity or complementarity on the simplex.
    fn kkt(&self, w: &DVector<f64>) -> f64 {
        let g = self.gradient(w);
        let mu = w.dot(&g);
        (0..w.len())
            .map(|j| (w[j] * (g[j] - mu).abs()).max(mu - g[j]))
            .fold(0.0, f64::max)
    }

    /// Exact minimizer on the support of `w` with the sum constraint, if it
    /// stays feasible and the system is nonsingular.
    fn polish(&self, w: &DVector<f64>) -> Option<DVector<f64>> {
        let s: Vec<usize> = (0..w.len()).filter(|&j| w[j] > 1e-12).collect();
        let k = s.len();
        let mut a = DMatrix::zeros(k + 1, k + 1);
        let mut rhs = DVector::zeros(k + 1);
        for (r, &i) in s.iter().enumerate() {
            for (c, &j) in s.iter().enumerate() {
                a[(r, c)] = 2.0 * self.q[(i, j)];
            }
            a[(r, k)] = 1.0;
            a[(k, r)] = 1.0;
            rhs[r] = 2.0 * self.c[i];
        }
        rhs[k] = 1.0;
        let lu = a.lu();
        if lu.determinant().abs() < 1e-14 {
            return None;
        }
        let sol = lu.solve(&rhs)?;
        let mut out = DVector::zeros(w.len());
        for (r, &i) in s.iter().enumerate() {
            if !(sol[r] >= 0.0) {
                return None;
            }
            out[i] = sol[r];
        }
        let total = out.sum();
        out /= total;
        Some(out)
    }
}

/// Simplex-constrained least squares `min ‖y − Pw‖²`.
///
/// Projected gradient with backtracking from the uniform vector, with a
/// periodic exact solve on the current support. When the optimum is not
/// unique the answer is whatever this fixed iteration reaches from the
/// uniform start; identical columns therefore share weight equally.
pub fn stacking_weights(preds: &DMatrix<f64>, y: &DVector<f64>) -> Result<WeightVector> {
    let q = preds.ncols();
    if q == 0 {
        return Err(Error::InvalidArgument("no prediction columns".into()));
    }
    if preds.nrows() != y.len() {
        return Err(Error::Dimension(format!(
            "{} prediction rows for {} responses",
            preds.nrows(),
            y.len()
        )));
    }
    if preds.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "non-finite prediction or response".into(),
        ));
    }
    if q == 1 {
        return WeightVector::new(vec![1.0], WeightMethod::Stacking);
    }
    let qp = Qp::new(preds, y);
    let mut w = DVector::from_element(q, 1.0 / q as f64);
    let mut f = qp.value(&w);
    let mut step = 1.0 / (2.0 * qp.q.trace().max(1e-300));
    for iter in 0..QP_MAX_ITER {
        if qp.kkt(&w) <= QP_KKT_TOL {
            break;
        }
        if iter % 25 == 24 {
            if let Some(p) = qp.polish(&w) {
                if qp.value(&p) <= f && qp.kkt(&p) <= QP_KKT_TOL {
                    w = p;
                    break;
                }
            }
        }
        let g = qp.gradient(&w);
        let mut t = step * 4.0;
        loop {
            let trial: Vec<f64> = (0..q).map(|j| w[j] - t * g[j]).collect();
            let cand = DVector::from_vec(project_simplex(&trial));
            let d = &cand - &w;
            let fc = qp.value(&cand);
            if fc <= f + g.dot(&d) + d.norm_squared() / (2.0 * t) || t < 1e-300 {
                w = cand;
                f = fc;
                step = t;
                break;
            }
            t *= 0.5;
        }
    }
    let total = w.sum();
    let weights: Vec<f64> = w.iter().map(|v| v / total).collect();
    WeightVector::new(weights, WeightMethod::Stacking)
}

/// Stacking objective `‖y − Pw‖²`.
pub fn stacking_objective(preds: &DMatrix<f64>, y: &DVector<f64>, w: &[f64]) -> f64 {
    (y - preds * DVector::from_column_slice(w)).norm_squared()
}

/// A candidate predictor that can be refitted on a training split.
pub trait CandidateModel: Sync {
    fn name(&self) -> String;
    fn fit_predict(&self, train: &Dataset, test_rows: &[Vec<f64>]) -> Result<Vec<f64>>;
}

impl CandidateModel for PenaltySpec {
    fn name(&self) -> String {
        self.kind.to_string()
    }

    fn fit_predict(&self, train: &Dataset, test_rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        let m = fit_penalized(train, self)?;
        Ok(test_rows.iter().map(|x| m.predict(x)).collect())
    }
}

/// Out-of-fold prediction matrix: entry (i, j) is model j's prediction for
/// case i from the fit that excluded case i's fold.
pub fn cv_predictions<M: CandidateModel>(
    d: &Dataset,
    models: &[M],
    folds: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let labels = assign_folds(d.n(), folds, seed)?;
    let per_fold: Result<Vec<(Vec<usize>, Vec<Vec<f64>>)>> = (0..folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..d.n()).filter(|&i| labels[i] != f).collect();
            let test: Vec<usize> = (0..d.n()).filter(|&i| labels[i] == f).collect();
            let train_d = d.select_rows(&train);
            let rows: Vec<Vec<f64>> = test.iter().map(|&i| d.row(i)).collect();
            let preds = models
                .iter()
                .map(|m| {
                    m.fit_predict(&train_d, &rows).map_err(|e| Error::FoldFit {
                        model: m.name(),
                        fold: f,
                        source: Box::new(e),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((test, preds))
        })
        .collect();
    let mut out = DMatrix::zeros(d.n(), models.len());
    for (test, preds) in per_fold? {
        for (j, col) in preds.iter().enumerate() {
            for (k, &i) in test.iter().enumerate() {
                out[(i, j)] = col[k];
            }
        }
    }
    Ok(out)
}

/// `wᵢ ∝ exp(−BICᵢ/2)` with `BICᵢ = −2ℓᵢ + kᵢ log n`, shifted by the minimum.
pub fn bic_weights(
    log_likelihoods: &[f64],
    param_counts: &[usize],
    n: usize,
) -> Result<WeightVector> {
    if log_likelihoods.is_empty() || log_likelihoods.len() != param_counts.len() {
        return Err(Error::Dimension(format!(
            "{} log-likelihoods for {} parameter counts",
            log_likelihoods.len(),
            param_counts.len()
        )));
    }
    if log_likelihoods.iter().any(|l| !l.is_finite()) || n == 0 {
        return Err(Error::InvalidArgument(
            "non-finite log-likelihood or n = 0".into(),
        ));
    }
    let ln_n = (n as f64).ln();
    let bic: Vec<f64> = log_likelihoods
        .iter()
        .zip(param_counts)
        .map(|(l, &k)| -2.0 * l + k as f64 * ln_n)
        .collect();
    Ok(weights_from_bic(&bic))
}

pub(crate) fn weights_from_bic(bic: &[f64]) -> WeightVector {
    let best = bic.iter().cloned().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = bic.iter().map(|b| (-(b - best) / 2.0).exp()).collect();
    let s: f64 = raw.iter().sum();
    WeightVector {
        weights: raw.iter().map(|r| r / s).collect(),
        method: WeightMethod::BicPosterior,
    }
}

fn check_joint(joint: &DMatrix<f64>) -> Result<()> {
    if joint.is_empty() {
        return Err(Error::InvalidWeights("empty weight grid".into()));
    }
    check_weights(joint.as_slice())
}

/// Marginal weight of each variable set (column) from a joint
/// model × variable-set weight grid.
pub fn variable_set_importance(joint: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_joint(joint)?;
    Ok(joint.column_iter().map(|c| c.sum()).collect())
}

/// Splits a joint grid into row marginals and row-conditional weights. A row
/// with zero mass gets uniform conditional weights.
pub fn factor_grid(joint: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    check_joint(joint)?;
    let m = joint.ncols();
    let outer: Vec<f64> = joint.row_iter().map(|r| r.sum()).collect();
    let inner = joint
        .row_iter()
        .zip(&outer)
        .map(|(r, &s)| {
            if s > 0.0 {
                let v: Vec<f64> = r.iter().map(|x| x / s).collect();
                let t: f64 = v.iter().sum();
                v.iter().map(|x| x / t).collect()
            } else {
                vec![1.0 / m as f64; m]
            }
        })
        .collect();
    let t: f64 = outer.iter().sum();
    Ok((outer.iter().map(|o| o / t).collect(), inner))
}
