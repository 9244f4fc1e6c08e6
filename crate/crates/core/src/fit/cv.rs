use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{derive_seed, seed_stream};

use super::data::Dataset;
use super::penalized::{fit_path, PenaltyKind, PenaltySpec, Standardized};

pub const LAMBDA_GRID_LEN: usize = 100;

/// Balanced random fold labels in `0..g`, deterministic given the seed.
pub fn assign_folds(n: usize, g: usize, seed: u64) -> Result<Vec<usize>> {
    if g < 2 || g > n {
        return Err(Error::InvalidArgument(format!(
            "fold count {g} must lie in [2, {n}]"
        )));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % g).collect();
    labels.shuffle(&mut seed_stream(derive_seed(seed, "folds"), 0));
    Ok(labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    /// Minimizer of the CV curve.
    pub lambda: f64,
    pub cv_error: f64,
    /// Largest λ whose CV error is within one standard error of the minimum.
    pub lambda_1se: f64,
    pub cv_error_1se: f64,
    pub grid: Vec<f64>,
    /// Mean squared out-of-fold error at each grid point.
    pub curve: Vec<f64>,
    pub se: Vec<f64>,
}

impl LambdaSelection {
    /// `(λ, CV error)` under a rule.
    pub fn chosen(&self, rule: LambdaRule) -> (f64, f64) {
        match rule {
            LambdaRule::Min => (self.lambda, self.cv_error),
            LambdaRule::OneSe => (self.lambda_1se, self.cv_error_1se),
        }
    }
}

/// How λ is read off the CV curve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaRule {
    #[default]
    Min,
    OneSe,
}

/// glmnet's grid: 100 log-spaced values from the smallest λ that zeroes
/// every coefficient down to 1% of it (0.01% when n ≥ p). Ridge has no such
/// λ, so its top uses mixing 0.001 on the response scaled to unit norm, which
/// is where glmnet's ridge path starts.
fn lambda_grid(d: &Dataset, spec: &PenaltySpec) -> Vec<f64> {
    let s = Standardized::new(d);
    let pf = spec
        .adaptive_weights
        .clone()
        .filter(|_| spec.kind.is_adaptive())
        .unwrap_or_else(|| vec![1.0; d.p()]);
    let mut top = s.lambda_max(spec.mixing(), &pf);
    if spec.kind == PenaltyKind::Ridge {
        top /= s.yc.norm();
    }
    if !(top > 0.0 && top.is_finite()) {
        top = 1.0;
    }
    let ratio: f64 = if d.n() < d.p() { 1e-2 } else { 1e-4 };
    let steps = (LAMBDA_GRID_LEN - 1) as f64;
    (0..LAMBDA_GRID_LEN)
        .map(|k| top * ratio.powf(k as f64 / steps))
        .collect()
}

/// Chooses λ by `folds`-fold cross-validation over a 100-point log grid
/// running from the all-zero λ down, minimizing mean squared out-of-fold
/// error. Ties go to the larger λ.
pub fn select_lambda_cv(
    d: &Dataset,
    spec: &PenaltySpec,
    folds: usize,
    seed: u64,
) -> Result<LambdaSelection> {
    select_lambda_cv_with(d, spec, folds, seed, |_| Ok(spec.clone()))
}

/// As [`select_lambda_cv`], but each fold fits the spec that `prepare`
/// builds from its training rows (for data-dependent penalty factors). The
/// grid still comes from `spec` on the full data.
pub fn select_lambda_cv_with<F>(
    d: &Dataset,
    spec: &PenaltySpec,
    folds: usize,
    seed: u64,
    prepare: F,
) -> Result<LambdaSelection>
where
    F: Fn(&Dataset) -> Result<PenaltySpec> + Sync,
{
    if spec.kind == PenaltyKind::Ols {
        return Err(Error::InvalidPenalty("OLS has no lambda to select".into()));
    }
    let grid = lambda_grid(d, spec);
    let labels = assign_folds(d.n(), folds, seed)?;
    let per_fold: Result<Vec<Vec<f64>>> = (0..folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..d.n()).filter(|&i| labels[i] != f).collect();
            let test: Vec<usize> = (0..d.n()).filter(|&i| labels[i] == f).collect();
            let train_d = d.select_rows(&train);
            let fits = prepare(&train_d)
                .and_then(|fs| fit_path(&train_d, &fs, &grid))
                .map_err(|e| Error::FoldFit {
                    model: spec.kind.to_string(),
                    fold: f,
                    source: Box::new(e),
                })?;
            Ok(fits
                .iter()
                .map(|m| {
                    test.iter()
                        .map(|&i| {
                            let e = d.y()[i] - m.predict(&d.row(i));
                            e * e
                        })
                        .sum()
                })
                .collect())
        })
        .collect();
    let per_fold = per_fold?;
    let curve: Vec<f64> = (0..grid.len())
        .map(|k| per_fold.iter().map(|f| f[k]).sum::<f64>() / d.n() as f64)
        .collect();
    let best = (0..curve.len()).fold(0, |b, k| if curve[k] < curve[b] { k } else { b });
    // glmnet's standard error of the CV curve: fold MSEs weighted by fold size.
    let sizes: Vec<f64> = (0..folds)
        .map(|f| labels.iter().filter(|&&l| l == f).count() as f64)
        .collect();
    let se: Vec<f64> = (0..grid.len())
        .map(|k| {
            let ss: f64 = per_fold
                .iter()
                .zip(&sizes)
                .map(|(f, &m)| m * (f[k] / m - curve[k]).powi(2))
                .sum();
            (ss / d.n() as f64 / (folds - 1) as f64).sqrt()
        })
        .collect();
    let limit = curve[best] + se[best];
    let one_se = (0..=best).find(|&k| curve[k] <= limit).unwrap_or(best);
    Ok(LambdaSelection {
        lambda: grid[best],
        cv_error: curve[best],
        lambda_1se: grid[one_se],
        cv_error_1se: curve[one_se],
        grid,
        curve,
        se,
    })
}
