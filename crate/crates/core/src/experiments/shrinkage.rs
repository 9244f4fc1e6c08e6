//! Stacked shrinkage regressions on a sparse p > n linear model.
//!
//! Each method's predictive at the new point is `N(x'β̂, σ̂² + Var̂(x'β̂))`
//! with σ̂² from an OLS refit on the selected variables and Var̂ from a case
//! bootstrap at the chosen λ. The stacked mixture is evaluated by sampling
//! `eval_draws · ŵ_j` values from each model and reading off empirical
//! quantiles.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::average::{
    cv_predictions, stacking_weights, CandidateModel, WeightMethod, WeightVector,
};
use crate::error::{Error, Result};
use crate::fit::{
    adaptive_weights_from_ridge, bootstrap_pred_variance_with, estimate_sigma2, fit_penalized,
    select_lambda_cv, select_lambda_cv_with, Dataset, FittedModel, LambdaRule, PenaltyKind,
    PenaltySpec,
};
use crate::intervals::{
    choose_model_list, coverage_of_draws, prediction_interval, CandidateSummary, PredictionInterval,
};
use crate::mixture::{ComponentPredictive, PredictiveMixture};
use crate::numeric::{derive_seed, fmt_full, seed_stream};
use crate::report::{decomposition_csv, model_list_csv, tau_sweep_csv};
use crate::tree::FactorTree;
use crate::vartest::{asl_test_with, bootstrap_trees, TestOutcome};

use super::{
    crossing_tau, default_sweep_taus, median, model_tree, stacking_table_csv, CoverageMode,
    ScenarioSpec, StudyKind, StudyOutput,
};

/// Sparse Gaussian linear model: `nonzero` leading coefficients drawn from
/// `N(beta_mean, beta_sd²)`, the rest zero, i.i.d. standard normal features.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinearScenario {
    pub n: usize,
    pub p: usize,
    pub nonzero: usize,
    pub beta_mean: f64,
    pub beta_sd: f64,
    /// Overrides the random coefficients when set.
    pub beta: Option<Vec<f64>>,
    pub noise_sd: f64,
}

impl Default for LinearScenario {
    fn default() -> Self {
        Self {
            n: 50,
            p: 100,
            nonzero: 5,
            beta_mean: 5.0,
            beta_sd: 1.5,
            beta: None,
            noise_sd: 1.0,
        }
    }
}

/// The first `n − 1` generated cases for fitting and the last as the new point.
#[derive(Clone, Debug)]
pub struct LinearDraw {
    pub train: Dataset,
    pub x_new: Vec<f64>,
    /// `x_newᵀβ`.
    pub mean_new: f64,
    pub beta: Vec<f64>,
    pub noise_sd: f64,
}

impl LinearDraw {
    /// A fresh outcome at the new point.
    pub fn outcome(&self, rng: &mut impl rand::Rng) -> f64 {
        let e: f64 = StandardNormal.sample(rng);
        self.mean_new + self.noise_sd * e
    }
}

pub fn generate_linear(s: &LinearScenario, seed: u64) -> Result<LinearDraw> {
    if s.n < 4 || s.p == 0 || s.nonzero > s.p || !(s.noise_sd > 0.0) || !(s.beta_sd >= 0.0) {
        return Err(Error::Config(format!(
            "linear scenario needs n >= 4, p >= 1, nonzero <= p and positive noise; got n {}, p {}, nonzero {}, noise {}",
            s.n, s.p, s.nonzero, s.noise_sd
        )));
    }
    let mut rng = seed_stream(derive_seed(seed, "generator"), 0);
    let beta = match &s.beta {
        Some(b) if b.len() != s.p => {
            return Err(Error::Config(format!(
                "{} coefficients for p = {}",
                b.len(),
                s.p
            )))
        }
        Some(b) => b.clone(),
        None => {
            let nd =
                Normal::new(s.beta_mean, s.beta_sd).map_err(|e| Error::Config(e.to_string()))?;
            (0..s.p)
                .map(|j| {
                    if j < s.nonzero {
                        nd.sample(&mut rng)
                    } else {
                        0.0
                    }
                })
                .collect()
        }
    };
    let x = DMatrix::from_fn(s.n, s.p, |_, _| StandardNormal.sample(&mut rng));
    let y = DVector::from_fn(s.n, |i, _| {
        let e: f64 = StandardNormal.sample(&mut rng);
        (0..s.p).map(|j| x[(i, j)] * beta[j]).sum::<f64>() + s.noise_sd * e
    });
    let rows: Vec<usize> = (0..s.n - 1).collect();
    let train = Dataset::new(x.clone(), y)?.select_rows(&rows);
    let x_new: Vec<f64> = x.row(s.n - 1).iter().copied().collect();
    let mean_new = x_new.iter().zip(&beta).map(|(a, b)| a * b).sum();
    Ok(LinearDraw {
        train,
        x_new,
        mean_new,
        beta,
        noise_sd: s.noise_sd,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShrinkageSettings {
    pub methods: Vec<PenaltyKind>,
    pub folds: usize,
    pub enet_alpha: f64,
    pub lambda_rule: LambdaRule,
    pub variance_bootstrap: usize,
    pub eval_draws: usize,
    pub coverage_draws: usize,
    pub coverage: CoverageMode,
    pub refit_lambda: bool,
    pub test: bool,
    pub b: usize,
    pub j: usize,
    pub taus: Vec<f64>,
    pub alpha: f64,
    pub delta: f64,
    pub null_form: crate::vartest::NullForm,
}

impl ShrinkageSettings {
    pub fn from_spec(spec: &ScenarioSpec) -> Self {
        let p = &spec.pipeline;
        Self {
            methods: p.methods.clone(),
            folds: p.folds,
            enet_alpha: p.enet_alpha,
            lambda_rule: p.lambda_rule,
            variance_bootstrap: p.variance_bootstrap,
            eval_draws: p.eval_draws,
            coverage_draws: p.coverage_draws,
            coverage: p.coverage,
            refit_lambda: p.refit_lambda,
            test: p.test,
            b: p.b,
            j: p.j,
            taus: p.taus.clone().unwrap_or_else(default_sweep_taus),
            alpha: p.alpha,
            delta: p.delta,
            null_form: p.null_form,
        }
    }

    fn needs_outer_bootstrap(&self) -> bool {
        self.test || self.coverage == CoverageMode::Bootstrap
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodFit {
    pub spec: PenaltySpec,
    /// Out-of-fold MSE at the chosen λ, when λ was selected on this data.
    pub cv_error: Option<f64>,
    pub mean: f64,
    pub sigma2: f64,
    /// "ols-refit", "cv-error" or the method whose σ̂² was borrowed.
    pub sigma2_source: String,
    pub pred_variance: f64,
    pub support: usize,
    /// Ridge λ behind the adaptive weights, for adaptive methods.
    pub ridge_lambda: Option<f64>,
}

impl MethodFit {
    pub fn name(&self) -> String {
        self.spec.kind.to_string()
    }

    pub fn variance(&self) -> f64 {
        self.sigma2 + self.pred_variance
    }

    pub fn predictive(&self) -> Result<ComponentPredictive> {
        ComponentPredictive::gaussian(self.mean, self.variance())
    }
}

#[derive(Clone, Debug)]
pub struct StackedFit {
    pub methods: Vec<MethodFit>,
    pub weights: WeightVector,
    pub tree: FactorTree,
}

impl StackedFit {
    pub fn names(&self) -> Vec<String> {
        self.methods.iter().map(MethodFit::name).collect()
    }

    /// Chosen penalties and their CV errors, for reuse inside replicates.
    pub fn tuning(&self) -> Vec<Tuned> {
        self.methods
            .iter()
            .map(|m| Tuned {
                spec: m.spec.clone(),
                cv_error: m.cv_error,
                ridge_lambda: m.ridge_lambda,
            })
            .collect()
    }
}

/// A method at its chosen λ. Adaptive methods carry the ridge λ their
/// weights come from, so every refit (CV fold, bootstrap resample)
/// recomputes the weights from its own rows.
#[derive(Clone, Debug)]
pub struct Tuned {
    pub spec: PenaltySpec,
    pub cv_error: Option<f64>,
    pub ridge_lambda: Option<f64>,
}

impl Tuned {
    fn prepared(&self, d: &Dataset) -> Result<PenaltySpec> {
        prepare_spec(&self.spec, self.ridge_lambda, d)
    }

    fn fit(&self, d: &Dataset) -> Result<FittedModel> {
        fit_penalized(d, &self.prepared(d)?)
    }
}

fn prepare_spec(spec: &PenaltySpec, ridge_lambda: Option<f64>, d: &Dataset) -> Result<PenaltySpec> {
    match ridge_lambda {
        Some(l) if spec.kind.is_adaptive() => Ok(PenaltySpec {
            adaptive_weights: Some(adaptive_weights_from_ridge(d, l)?),
            ..spec.clone()
        }),
        _ => Ok(spec.clone()),
    }
}

impl CandidateModel for Tuned {
    fn name(&self) -> String {
        self.spec.kind.to_string()
    }

    fn fit_predict(&self, train: &Dataset, test_rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        let m = self.fit(train)?;
        Ok(test_rows.iter().map(|x| m.predict(x)).collect())
    }
}

/// Order in which σ̂² is borrowed for ridge, which keeps every variable.
const RIDGE_SIGMA_DONORS: [PenaltyKind; 4] = [
    PenaltyKind::Enet,
    PenaltyKind::Aenet,
    PenaltyKind::Lasso,
    PenaltyKind::Alasso,
];

fn tune(d: &Dataset, s: &ShrinkageSettings, seed: u64) -> Result<Vec<Tuned>> {
    let lambda_seed = derive_seed(seed, "lambda");
    let needs_ridge = s
        .methods
        .iter()
        .any(|k| *k == PenaltyKind::Ridge || k.is_adaptive());
    let ridge = if needs_ridge {
        Some(select_lambda_cv(
            d,
            &PenaltySpec::ridge(0.0),
            s.folds,
            lambda_seed,
        )?)
    } else {
        None
    };
    let ridge = ridge.map(|r| r.chosen(s.lambda_rule));
    let ridge_lambda = ridge.map(|r| r.0);
    s.methods
        .iter()
        .map(|&kind| {
            let base = match kind {
                PenaltyKind::Ols => {
                    return Ok(Tuned {
                        spec: PenaltySpec::ols(),
                        cv_error: None,
                        ridge_lambda: None,
                    })
                }
                PenaltyKind::Ridge => {
                    let (lambda, cv_error) = ridge.expect("ridge selection");
                    return Ok(Tuned {
                        spec: PenaltySpec::ridge(lambda),
                        cv_error: Some(cv_error),
                        ridge_lambda: None,
                    });
                }
                PenaltyKind::Lasso => PenaltySpec::lasso(0.0),
                PenaltyKind::Enet => PenaltySpec::enet(0.0, s.enet_alpha),
                PenaltyKind::Alasso => PenaltySpec::alasso(0.0, vec![1.0; d.p()]),
                PenaltyKind::Aenet => PenaltySpec::aenet(0.0, s.enet_alpha, vec![1.0; d.p()]),
            };
            let rl = if kind.is_adaptive() {
                ridge_lambda
            } else {
                None
            };
            let full = prepare_spec(&base, rl, d)?;
            let sel = select_lambda_cv_with(d, &full, s.folds, lambda_seed, |fold| {
                prepare_spec(&base, rl, fold)
            })?;
            let (lambda, cv_error) = sel.chosen(s.lambda_rule);
            Ok(Tuned {
                spec: full.with_lambda(lambda),
                cv_error: Some(cv_error),
                ridge_lambda: rl,
            })
        })
        .collect()
}

/// Fits every method, its predictive at `x_new` and the stacking weights.
/// `tuning` fixes the penalties (and the σ̂² fallbacks); `None` selects λ by
/// cross-validation on `d`.
pub fn fit_stack(
    d: &Dataset,
    x_new: &[f64],
    s: &ShrinkageSettings,
    seed: u64,
    tuning: Option<&[Tuned]>,
) -> Result<StackedFit> {
    let tuned = match tuning {
        Some(t) => t.to_vec(),
        None => tune(d, s, seed)?,
    };
    let n = d.n() as f64;
    let mut methods: Vec<MethodFit> = tuned
        .par_iter()
        .map(|t| {
            let spec = &t.prepared(d)?;
            let cv_error = &t.cv_error;
            let m = fit_penalized(d, spec)?;
            let (sigma2, source) = if spec.kind == PenaltyKind::Ridge {
                (f64::NAN, String::new())
            } else {
                match estimate_sigma2(d, &m) {
                    Ok(v) => (v, "ols-refit".to_string()),
                    Err(Error::SaturatedSupport { .. }) => match cv_error {
                        Some(e) => (*e, "cv-error".to_string()),
                        None => (residual_mean_square(d, &m, n), "residual".to_string()),
                    },
                    Err(e) => return Err(e),
                }
            };
            let pred_variance = bootstrap_pred_variance_with(
                d,
                x_new,
                s.variance_bootstrap,
                derive_seed(seed, &format!("variance-{}", spec.kind)),
                |r| t.fit(r),
            )?;
            Ok(MethodFit {
                spec: spec.clone(),
                cv_error: *cv_error,
                mean: m.predict(x_new),
                sigma2,
                sigma2_source: source,
                pred_variance,
                support: m.support().len(),
                ridge_lambda: t.ridge_lambda,
            })
        })
        .collect::<Result<_>>()?;
    if let Some(r) = methods
        .iter()
        .position(|m| m.spec.kind == PenaltyKind::Ridge)
    {
        let donor = RIDGE_SIGMA_DONORS
            .iter()
            .find_map(|k| methods.iter().find(|m| m.spec.kind == *k));
        let (v, src) = match (donor, methods[r].cv_error) {
            (Some(dm), _) => (dm.sigma2, dm.name()),
            (None, Some(e)) => (e, "cv-error".to_string()),
            (None, None) => {
                let m = fit_penalized(d, &methods[r].spec)?;
                (residual_mean_square(d, &m, n), "residual".to_string())
            }
        };
        methods[r].sigma2 = v;
        methods[r].sigma2_source = src;
    }
    let weights = if tuned.len() == 1 {
        WeightVector::new(vec![1.0], WeightMethod::Stacking)?
    } else {
        let oof = cv_predictions(d, &tuned, s.folds, derive_seed(seed, "stacking"))?;
        stacking_weights(&oof, d.y())?
    };
    let names: Vec<String> = methods.iter().map(MethodFit::name).collect();
    let leaves = methods
        .iter()
        .map(MethodFit::predictive)
        .collect::<Result<Vec<_>>>()?;
    let tree = model_tree(&names, &weights.weights, leaves)?;
    Ok(StackedFit {
        methods,
        weights,
        tree,
    })
}

fn residual_mean_square(d: &Dataset, m: &crate::fit::FittedModel, n: f64) -> f64 {
    let rss: f64 = (0..d.n())
        .map(|i| {
            let e = d.y()[i] - m.predict(&d.row(i));
            e * e
        })
        .sum();
    rss / (n - 1.0)
}

/// Splits `total` into integer counts proportional to `weights`, handing the
/// remainder to the largest fractional parts (ties to the lower index).
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Type-1 empirical quantile of sorted values: the `⌈p·n⌉`-th order statistic.
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let k = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

fn empirical_interval(mut draws: Vec<f64>, alpha: f64, source: &str) -> PredictionInterval {
    draws.sort_by(f64::total_cmp);
    PredictionInterval {
        lower: empirical_quantile(&draws, alpha / 2.0),
        upper: empirical_quantile(&draws, 1.0 - alpha / 2.0),
        alpha,
        source: source.to_string(),
    }
}

/// One row of Table 1 and the decomposition of the stacked predictive.
#[derive(Clone, Debug, Serialize)]
pub struct ShrinkageReplicate {
    pub seed: u64,
    pub names: Vec<String>,
    pub lambdas: Vec<f64>,
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    /// Stack first, then each method.
    pub variances: Vec<f64>,
    /// Stack first, then each method.
    pub coverages: Vec<f64>,
    pub intervals: Vec<PredictionInterval>,
    pub within: f64,
    pub between: f64,
    pub proportion: f64,
    pub mean_new: f64,
    pub tests: Vec<TestOutcome>,
    pub tau_star: Option<f64>,
    #[serde(skip)]
    pub tree: FactorTree,
}

impl ShrinkageReplicate {
    /// Combined stacking weight on the named methods.
    pub fn weight_on(&self, kinds: &[PenaltyKind]) -> f64 {
        self.names
            .iter()
            .zip(&self.weights)
            .filter(|(n, _)| kinds.iter().any(|k| k.name() == n.as_str()))
            .map(|(_, w)| w)
            .sum()
    }

    pub fn coverage_of(&self, kind: PenaltyKind) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == kind.name())
            .map(|i| self.coverages[i + 1])
    }
}

fn run_replicate(
    scenario: &LinearScenario,
    s: &ShrinkageSettings,
    seed: u64,
) -> Result<ShrinkageReplicate> {
    let draw = generate_linear(scenario, seed)?;
    let fit = fit_stack(&draw.train, &draw.x_new, s, seed, None)?;
    let names = fit.names();
    let report = fit.tree.decompose();
    let within = report.terms[1].variance;
    let between = report.terms[0].variance;

    // Evaluation sample of each method and of the stacked mixture.
    let eval_seed = derive_seed(seed, "eval");
    let per_method: Vec<Vec<f64>> = fit
        .methods
        .par_iter()
        .enumerate()
        .map(|(j, m)| {
            let comp = m.predictive().expect("validated predictive");
            let mut rng = seed_stream(eval_seed, j as u64);
            (0..s.eval_draws).map(|_| comp.sample(&mut rng)).collect()
        })
        .collect();
    let counts = largest_remainder(&fit.weights.weights, s.eval_draws);
    let stack_draws: Vec<f64> = per_method
        .iter()
        .zip(&counts)
        .flat_map(|(d, &c)| d[..c].iter().copied())
        .collect();
    let mut intervals = vec![empirical_interval(stack_draws, s.alpha, "stack")];
    for (d, name) in per_method.into_iter().zip(&names) {
        intervals.push(empirical_interval(d, s.alpha, name));
    }

    let mut variances = vec![report.total];
    variances.extend(fit.methods.iter().map(MethodFit::variance));

    let mut tests = Vec::new();
    let coverages: Vec<f64> = if s.needs_outer_bootstrap() {
        let tuning = fit.tuning();
        let x_new = draw.x_new.clone();
        let pipeline = |d: &Dataset, rep_seed: u64| -> Result<FactorTree> {
            let t = if s.refit_lambda {
                None
            } else {
                Some(tuning.as_slice())
            };
            Ok(fit_stack(d, &x_new, s, rep_seed, t)?.tree)
        };
        let trees = bootstrap_trees(&pipeline, &draw.train, s.b, seed)?;
        if s.test {
            let z: Vec<f64> = trees
                .iter()
                .map(|t| t.decompose().terms[0].proportion.clamp(0.0, 1.0))
                .collect();
            let inner = derive_seed(seed, "inner");
            tests = s
                .taus
                .iter()
                .map(|&tau| asl_test_with(&z, tau, s.j, inner, s.null_form))
                .collect::<Result<_>>()?;
        }
        if s.coverage == CoverageMode::Bootstrap {
            bootstrap_coverage(&trees, &draw, s.alpha, derive_seed(seed, "outcomes"))?
        } else {
            fresh_coverage(&intervals, &draw, s.coverage_draws, seed)
        }
    } else {
        fresh_coverage(&intervals, &draw, s.coverage_draws, seed)
    };

    Ok(ShrinkageReplicate {
        seed,
        lambdas: fit.methods.iter().map(|m| m.spec.lambda).collect(),
        means: fit.methods.iter().map(|m| m.mean).collect(),
        names,
        weights: fit.weights.weights.clone(),
        variances,
        coverages,
        intervals,
        within,
        between,
        proportion: report.terms[0].proportion,
        mean_new: draw.mean_new,
        tau_star: crossing_tau(&tests),
        tests,
        tree: fit.tree,
    })
}

fn fresh_coverage(
    intervals: &[PredictionInterval],
    draw: &LinearDraw,
    count: usize,
    seed: u64,
) -> Vec<f64> {
    let mut rng = seed_stream(derive_seed(seed, "fresh"), 0);
    let ys: Vec<f64> = (0..count).map(|_| draw.outcome(&mut rng)).collect();
    intervals
        .iter()
        .map(|pi| coverage_of_draws(pi, &ys))
        .collect()
}

/// Coverage of each replicate's own intervals against one fresh outcome per
/// replicate. Intervals here are exact mixture quantiles.
fn bootstrap_coverage(
    trees: &[FactorTree],
    draw: &LinearDraw,
    alpha: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let q = trees[0].leaves().len();
    let hits: Vec<Vec<bool>> = trees
        .par_iter()
        .enumerate()
        .map(|(b, t)| {
            let y = draw.outcome(&mut seed_stream(seed, b as u64));
            let mut row = vec![prediction_interval(&t.flatten(), alpha)?.contains(y)];
            for leaf in t.leaves() {
                row.push(
                    prediction_interval(&PredictiveMixture::single(leaf.clone()), alpha)?
                        .contains(y),
                );
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    Ok((0..=q)
        .map(|k| hits.iter().filter(|h| h[k]).count() as f64 / hits.len() as f64)
        .collect())
}

fn scenario_from(spec: &ScenarioSpec) -> LinearScenario {
    let g = &spec.generator;
    let d = LinearScenario::default();
    LinearScenario {
        n: g.n.unwrap_or(d.n),
        p: g.p.unwrap_or(d.p),
        nonzero: g.nonzero.unwrap_or(d.nonzero),
        beta_mean: g.beta_mean.unwrap_or(d.beta_mean),
        beta_sd: g.beta_sd.unwrap_or(d.beta_sd),
        beta: g.beta.clone(),
        noise_sd: g.noise_sd.unwrap_or(d.noise_sd),
    }
}

fn replicates_csv(reps: &[ShrinkageReplicate]) -> Result<String> {
    let names = &reps[0].names;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["replicate".to_string(), "seed".to_string()];
    header.extend(names.iter().map(|n| format!("weight_{n}")));
    header.push("variance_stack".into());
    header.extend(names.iter().map(|n| format!("variance_{n}")));
    header.push("coverage_stack".into());
    header.extend(names.iter().map(|n| format!("coverage_{n}")));
    header.extend(["within", "between", "proportion", "tau_star"].map(String::from));
    w.write_record(&header)?;
    for (r, rep) in reps.iter().enumerate() {
        let mut row = vec![r.to_string(), rep.seed.to_string()];
        row.extend(rep.weights.iter().map(|v| fmt_full(*v)));
        row.extend(rep.variances.iter().map(|v| fmt_full(*v)));
        row.extend(rep.coverages.iter().map(|v| fmt_full(*v)));
        row.extend([rep.within, rep.between, rep.proportion].map(fmt_full));
        row.push(rep.tau_star.map(fmt_full).unwrap_or_default());
        w.write_record(&row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Seed of replicate `r` of a study seeded with `seed`.
pub(crate) fn replicate_seed(seed: u64, r: usize) -> u64 {
    derive_seed(seed, &format!("replicate-{r}"))
}

/// Runs `spec.replicates` independent simulations. Tables describe the
/// first replicate; `replicates.csv` and the summary cover all of them.
pub fn run_shrinkage_study(spec: &ScenarioSpec) -> Result<StudyOutput> {
    spec.validate()?;
    let seed = spec.seed()?;
    let scenario = scenario_from(spec);
    let settings = ShrinkageSettings::from_spec(spec);
    if settings.needs_outer_bootstrap() && settings.b < crate::vartest::MIN_B {
        return Err(Error::Config(format!(
            "B = {} below the minimum of {}",
            settings.b,
            crate::vartest::MIN_B
        )));
    }
    let reps: Vec<ShrinkageReplicate> = (0..spec.replicates)
        .into_par_iter()
        .map(|r| run_replicate(&scenario, &settings, replicate_seed(seed, r)))
        .collect::<Result<_>>()?;
    let first = &reps[0];

    let mut files = vec![
        (
            "table1.csv".to_string(),
            stacking_table_csv(
                &first.names,
                &first.weights,
                &first.variances,
                Some(&first.coverages),
            )?,
        ),
        (
            "decomposition.csv".to_string(),
            decomposition_csv(&first.tree.decompose())?,
        ),
    ];
    let rows: Vec<CandidateSummary> = std::iter::once("stack".to_string())
        .chain(first.names.iter().cloned())
        .zip(first.coverages.iter().zip(&first.variances))
        .map(|(candidate, (&coverage, &variance))| CandidateSummary {
            candidate,
            coverage,
            variance,
        })
        .collect();
    let list = choose_model_list(&rows, settings.alpha, settings.delta)?;
    files.push(("model_list.csv".to_string(), model_list_csv(&list)?));
    if settings.test {
        files.push(("tau_sweep.csv".to_string(), tau_sweep_csv(&first.tests)?));
    }
    files.push(("replicates.csv".to_string(), replicates_csv(&reps)?));

    let share: Vec<f64> = reps
        .iter()
        .map(|r| r.weight_on(&[PenaltyKind::Lasso, PenaltyKind::Enet]))
        .collect();
    let stack_cov: Vec<f64> = reps.iter().map(|r| r.coverages[0]).collect();
    let props: Vec<f64> = reps.iter().map(|r| r.proportion).collect();
    let adaptive_low: Vec<f64> = reps
        .iter()
        .flat_map(|r| {
            [PenaltyKind::Alasso, PenaltyKind::Aenet]
                .into_iter()
                .filter_map(|k| r.coverage_of(k))
                .collect::<Vec<_>>()
        })
        .collect();
    let summary = json!({
        "study": StudyKind::Shrinkage.name(),
        "seed": seed,
        "replicates": reps.len(),
        "scenario": scenario,
        "settings": settings,
        "lasso_enet_share_at_least_0.9": share.iter().filter(|s| **s >= 0.9).count() as f64 / reps.len() as f64,
        "median_stack_coverage": median(&stack_cov),
        "median_between_proportion": median(&props),
        "adaptive_coverage_below_0.5": if adaptive_low.is_empty() { serde_json::Value::Null } else {
            json!(adaptive_low.iter().filter(|c| **c < 0.5).count() as f64 / adaptive_low.len() as f64)
        },
        "first": {
            "names": first.names,
            "lambdas": first.lambdas,
            "weights": first.weights,
            "variances": first.variances,
            "coverages": first.coverages,
            "within": first.within,
            "between": first.between,
            "proportion": first.proportion,
            "tau_star": first.tau_star,
            "chosen": list.rows[list.chosen].candidate,
        },
    });
    Ok(StudyOutput {
        study: StudyKind::Shrinkage,
        files,
        summary,
    })
}
