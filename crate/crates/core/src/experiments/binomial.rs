//! Links × variable-sets binomial GLM grid with BIC posterior weights, and
//! the sample-size sweep built on it.
//!
//! The tree has links as the outer factor and variable sets as the inner
//! one. Joint weights are `∝ prior(link)·prior(set)·exp(−BIC/2)`, split into
//! link marginals and within-link conditionals.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::average::{factor_grid, weights_from_bic};
use crate::error::{Error, Result};
use crate::fit::{fit_glm_with_fallback, table_order_subsets, Dataset, GlmFit, Link};
use crate::mixture::ComponentPredictive;
use crate::numeric::{derive_seed, fmt_full, seed_stream};
use crate::report::{decomposition_csv, numeric_csv, sweep_tests_csv, term_tests_csv};
use crate::tree::{DecompositionReport, FactorTree};
use crate::vartest::{test_all_terms, TermTestTable, LEVELS, MIN_B};

use super::shrinkage::replicate_seed;
use super::{median, ScenarioSpec, StudyKind, StudyOutput};

/// What the leaves predict at the new point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Successes out of `trials_new`, binomial given the fitted probability.
    #[default]
    Count,
    /// The success probability, Gaussian with delta-method variance.
    Probability,
    /// The expected count `trials_new · p̂`: the probability leaf scaled to
    /// counts, so no binomial sampling noise.
    MeanCount,
}

/// `Y ~ Binomial(trials, g⁻¹(xᵀβ))` with i.i.d. standard normal covariates
/// and no intercept.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BinomialScenario {
    pub beta: Vec<f64>,
    pub trials: u32,
    pub link: Link,
}

impl Default for BinomialScenario {
    fn default() -> Self {
        Self {
            beta: vec![0.75, 0.25, -0.3, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            trials: 30,
            link: Link::Logit,
        }
    }
}

/// `n` cases and a new covariate row, both from the scenario's design.
pub fn generate_binomial(s: &BinomialScenario, n: usize, seed: u64) -> Result<(Dataset, Vec<f64>)> {
    let p = s.beta.len();
    if p == 0 || s.trials == 0 || n < 2 {
        return Err(Error::Config(format!(
            "binomial scenario needs coefficients, trials >= 1 and n >= 2; got p {p}, trials {}, n {n}",
            s.trials
        )));
    }
    let mut rng = seed_stream(derive_seed(seed, "generator"), 0);
    let x = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
    let y = DVector::from_fn(n, |i, _| {
        let eta: f64 = (0..p).map(|j| x[(i, j)] * s.beta[j]).sum();
        let prob = s.link.mean(eta).clamp(0.0, 1.0);
        Binomial::new(s.trials as u64, prob)
            .expect("probability in [0, 1]")
            .sample(&mut rng) as f64
    });
    let mut xr = seed_stream(derive_seed(seed, "x-new"), 0);
    let x_new: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut xr)).collect();
    let d = Dataset::binomial(x, y, vec![s.trials; n])?;
    Ok((d, x_new))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPipeline {
    pub links: Vec<Link>,
    /// Column indices of each variable set.
    pub sets: Vec<Vec<usize>>,
    pub set_labels: Vec<String>,
    pub x_new: Vec<f64>,
    pub trials_new: u32,
    pub target: Target,
    pub link_prior: Vec<f64>,
    pub set_prior: Vec<f64>,
}

fn normalized_prior(given: Option<&[f64]>, len: usize, what: &str) -> Result<Vec<f64>> {
    match given {
        None => Ok(vec![1.0 / len as f64; len]),
        Some(w) => {
            if w.len() != len || w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::Config(format!(
                    "{what} prior needs {len} positive entries, got {w:?}"
                )));
            }
            let s: f64 = w.iter().sum();
            Ok(w.iter().map(|v| v / s).collect())
        }
    }
}

impl GridPipeline {
    /// Sets are every subset of `candidates` (up to `max_set_size` variables)
    /// in table order, intercept-only last.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        names: &[String],
        links: &[Link],
        candidates: &[usize],
        max_set_size: Option<usize>,
        x_new: Vec<f64>,
        trials_new: u32,
        target: Target,
        link_prior: Option<&[f64]>,
        set_prior: Option<&[f64]>,
    ) -> Result<Self> {
        if links.is_empty() {
            return Err(Error::Config("no links".into()));
        }
        if x_new.len() != names.len() {
            return Err(Error::Config(format!(
                "x_new has {} entries for {} covariates",
                x_new.len(),
                names.len()
            )));
        }
        if let Some(&c) = candidates.iter().find(|&&c| c >= names.len()) {
            return Err(Error::Config(format!("candidate column {c} out of range")));
        }
        if candidates.len() > 16 {
            return Err(Error::Config(format!(
                "{} candidate variables give too many subsets; list at most 16",
                candidates.len()
            )));
        }
        let cap = max_set_size.unwrap_or(usize::MAX);
        let sets: Vec<Vec<usize>> = table_order_subsets(candidates.len())
            .into_iter()
            .filter(|s| s.len() <= cap)
            .map(|s| s.iter().map(|&k| candidates[k]).collect())
            .collect();
        let set_labels = sets
            .iter()
            .map(|s: &Vec<usize>| {
                if s.is_empty() {
                    "none".to_string()
                } else {
                    format!(
                        "{{{}}}",
                        s.iter()
                            .map(|&j| names[j].as_str())
                            .collect::<Vec<_>>()
                            .join(",")
                    )
                }
            })
            .collect();
        Ok(Self {
            link_prior: normalized_prior(link_prior, links.len(), "link")?,
            set_prior: normalized_prior(set_prior, sets.len(), "variable-set")?,
            links: links.to_vec(),
            sets,
            set_labels,
            x_new,
            trials_new,
            target,
        })
    }

    fn leaf(&self, f: &GlmFit) -> Result<ComponentPredictive> {
        match self.target {
            Target::Count => f.count_predictive(&self.x_new, self.trials_new),
            Target::Probability => ComponentPredictive::gaussian(
                f.probability(&self.x_new),
                f.probability_variance(&self.x_new),
            ),
            Target::MeanCount => {
                let m = self.trials_new as f64;
                ComponentPredictive::gaussian(
                    m * f.probability(&self.x_new),
                    m * m * f.probability_variance(&self.x_new),
                )
            }
        }
    }

    pub fn fit(&self, d: &Dataset) -> Result<GridFit> {
        let cells: Vec<(Link, &Vec<usize>)> = self
            .links
            .iter()
            .flat_map(|&l| self.sets.iter().map(move |s| (l, s)))
            .collect();
        let fits: Vec<GlmFit> = cells
            .par_iter()
            .map(|(l, s)| fit_glm_with_fallback(d, *l, s))
            .collect::<Result<_>>()?;
        let ln_n = (d.n() as f64).ln();
        let m = self.sets.len();
        let bic: Vec<f64> = fits
            .iter()
            .map(|f| -2.0 * f.log_likelihood + f.param_count() as f64 * ln_n)
            .collect();
        let adjusted: Vec<f64> = bic
            .iter()
            .enumerate()
            .map(|(c, b)| b - 2.0 * (self.link_prior[c / m] * self.set_prior[c % m]).ln())
            .collect();
        let joint = weights_from_bic(&adjusted).weights;
        let (outer, inner) = factor_grid(&DMatrix::from_row_slice(self.links.len(), m, &joint))?;
        let leaves = fits
            .iter()
            .map(|f| self.leaf(f))
            .collect::<Result<Vec<_>>>()?;
        let tree = FactorTree::new(
            vec!["Links".into(), "Models".into()],
            vec![
                self.links.iter().map(|l| l.name().to_string()).collect(),
                self.set_labels.clone(),
            ],
            vec![outer, inner.concat()],
            leaves,
        )?;
        Ok(GridFit {
            fits,
            bic,
            joint,
            tree,
        })
    }

    pub fn tree(&self, d: &Dataset) -> Result<FactorTree> {
        Ok(self.fit(d)?.tree)
    }
}

#[derive(Clone, Debug)]
pub struct GridFit {
    /// Links outer, sets inner.
    pub fits: Vec<GlmFit>,
    pub bic: Vec<f64>,
    pub joint: Vec<f64>,
    pub tree: FactorTree,
}

impl GridFit {
    /// Cells refitted with the ridge fallback.
    pub fn fallback_count(&self) -> usize {
        self.fits.iter().filter(|f| f.ridge.is_some()).count()
    }
}

fn grid_csv(pipe: &GridPipeline, g: &GridFit) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "link",
        "variables",
        "log_likelihood",
        "bic",
        "weight",
        "probability",
        "leaf_mean",
        "leaf_variance",
        "iterations",
        "fallback_ridge",
    ])?;
    let m = pipe.sets.len();
    for (c, f) in g.fits.iter().enumerate() {
        let leaf = &g.tree.leaves()[c];
        w.write_record([
            pipe.links[c / m].name().to_string(),
            pipe.set_labels[c % m].clone(),
            fmt_full(f.log_likelihood),
            fmt_full(g.bic[c]),
            fmt_full(g.joint[c]),
            fmt_full(f.probability(&pipe.x_new)),
            fmt_full(leaf.mean()),
            fmt_full(leaf.variance()),
            f.iterations.to_string(),
            f.ridge.map(fmt_full).unwrap_or_default(),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

fn scenario_from(spec: &ScenarioSpec) -> Result<BinomialScenario> {
    let g = &spec.generator;
    let d = BinomialScenario::default();
    let beta = match (&g.beta, g.p) {
        (Some(b), Some(p)) if b.len() != p => {
            return Err(Error::Config(format!(
                "{} coefficients for p = {p}",
                b.len()
            )))
        }
        (Some(b), _) => b.clone(),
        (None, Some(p)) => {
            let mut b = d.beta.clone();
            b.resize(p, 0.0);
            b
        }
        (None, None) => d.beta,
    };
    Ok(BinomialScenario {
        beta,
        trials: g.trials.unwrap_or(d.trials),
        link: g.link.unwrap_or(d.link),
    })
}

fn candidates(spec: &ScenarioSpec, names: &[String]) -> Result<Vec<usize>> {
    match &spec.pipeline.variables {
        None => Ok((0..names.len()).collect()),
        Some(vars) => vars
            .iter()
            .map(|v| {
                names
                    .iter()
                    .position(|n| n == v)
                    .ok_or_else(|| Error::Config(format!("variable '{v}' not among {names:?}")))
            })
            .collect(),
    }
}

fn pipeline_for(
    spec: &ScenarioSpec,
    d: &Dataset,
    x_new: Vec<f64>,
    trials_new: u32,
) -> Result<GridPipeline> {
    let p = &spec.pipeline;
    GridPipeline::new(
        d.names(),
        &p.links,
        &candidates(spec, d.names())?,
        p.max_set_size,
        x_new,
        trials_new,
        p.target.unwrap_or(match spec.kind()? {
            StudyKind::NSweep => Target::MeanCount,
            _ => Target::Count,
        }),
        p.link_prior.as_deref(),
        p.set_prior.as_deref(),
    )
}

fn taus(spec: &ScenarioSpec) -> Vec<f64> {
    spec.pipeline
        .taus
        .clone()
        .unwrap_or_else(|| LEVELS.to_vec())
}

fn check_test_sizes(spec: &ScenarioSpec) -> Result<()> {
    if spec.pipeline.test && spec.pipeline.b < MIN_B {
        return Err(Error::Config(format!(
            "B = {} below the minimum of {MIN_B}",
            spec.pipeline.b
        )));
    }
    Ok(())
}

fn term_summary(report: &DecompositionReport) -> serde_json::Value {
    report
        .terms
        .iter()
        .map(|t| json!({"source": t.source, "variance": t.variance, "proportion": t.proportion}))
        .collect()
}

/// One analysis of a binomial dataset (from `inputs.data`, or generated).
pub fn run_binomial_grid_study(spec: &ScenarioSpec) -> Result<StudyOutput> {
    spec.validate()?;
    check_test_sizes(spec)?;
    let seed = spec.seed()?;
    if spec.replicates != 1 {
        return Err(Error::Config(
            "binomial_grid runs a single analysis; use n_sweep for replicates".into(),
        ));
    }
    let (d, x_new, trials_new) = match &spec.inputs.data {
        Some(path) => {
            let response = spec.inputs.response.as_deref().ok_or_else(|| {
                Error::Config("inputs.response is required with inputs.data".into())
            })?;
            let trials_col = spec.inputs.trials.as_deref().ok_or_else(|| {
                Error::Config("inputs.trials is required for binomial data".into())
            })?;
            let file = std::fs::File::open(path)
                .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
            let d = Dataset::from_csv(file, response, Some(trials_col))?;
            let x_new =
                spec.inputs.x_new.clone().ok_or_else(|| {
                    Error::Config("inputs.x_new is required with inputs.data".into())
                })?;
            let t = spec
                .inputs
                .trials_new
                .unwrap_or_else(|| d.trials().expect("binomial data")[0]);
            (d, x_new, t)
        }
        None => {
            let s = scenario_from(spec)?;
            let n = spec.generator.n.unwrap_or(50);
            let (d, x) = generate_binomial(&s, n, seed)?;
            let x_new = spec.inputs.x_new.clone().unwrap_or(x);
            (d, x_new, spec.inputs.trials_new.unwrap_or(s.trials))
        }
    };
    let pipe = pipeline_for(spec, &d, x_new, trials_new)?;
    let grid = pipe.fit(&d)?;
    let report = grid.tree.decompose();
    let mut files = vec![
        ("grid.csv".to_string(), grid_csv(&pipe, &grid)?),
        ("decomposition.csv".to_string(), decomposition_csv(&report)?),
    ];
    let mut tests = serde_json::Value::Null;
    if spec.pipeline.test {
        let tree_of = |data: &Dataset, _: u64| pipe.tree(data);
        let table = test_all_terms(
            &tree_of,
            &d,
            &taus(spec),
            spec.pipeline.b,
            spec.pipeline.j,
            seed,
        )?;
        files.push(("term_tests.csv".to_string(), term_tests_csv(&table)?));
        tests = test_summary(&table);
    }
    let summary = json!({
        "study": StudyKind::BinomialGrid.name(),
        "seed": seed,
        "n": d.n(),
        "cells": grid.fits.len(),
        "fallback_cells": grid.fallback_count(),
        "terms": term_summary(&report),
        "total": report.total,
        "tests": tests,
    });
    Ok(StudyOutput {
        study: StudyKind::BinomialGrid,
        files,
        summary,
    })
}

fn test_summary(t: &TermTestTable) -> serde_json::Value {
    t.report
        .terms
        .iter()
        .zip(&t.outcomes)
        .map(|(term, o)| {
            json!({
                "source": term.source,
                "z_bar": o[0].z_bar,
                "asl": o.iter().map(|x| x.asl).collect::<Vec<_>>(),
                "taus": t.taus,
            })
        })
        .collect()
}

/// Term values at one sample size: `[links, models, predictions]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub n: usize,
    pub total: f64,
    pub values: Vec<f64>,
    pub proportions: Vec<f64>,
}

impl SweepPoint {
    fn from_report(n: usize, r: &DecompositionReport) -> Self {
        Self {
            n,
            total: r.total,
            values: r.values(),
            proportions: r.proportions(),
        }
    }

    fn row(&self) -> Vec<f64> {
        let mut row = vec![self.n as f64, self.total];
        row.extend(&self.values);
        row.extend(&self.proportions);
        row
    }
}

const CURVE_HEADER: [&str; 8] = [
    "n",
    "total",
    "links",
    "models",
    "predictions",
    "links_proportion",
    "models_proportion",
    "predictions_proportion",
];

fn sweep_replicate(
    spec: &ScenarioSpec,
    s: &BinomialScenario,
    n_list: &[usize],
    seed: u64,
    with_tests: bool,
) -> Result<(Vec<SweepPoint>, Vec<TermTestTable>)> {
    let n_max = *n_list.last().expect("non-empty n_list");
    let (full, x) = generate_binomial(s, n_max, seed)?;
    let x_new = spec.inputs.x_new.clone().unwrap_or(x);
    let pipe = pipeline_for(
        spec,
        &full,
        x_new,
        spec.inputs.trials_new.unwrap_or(s.trials),
    )?;
    let mut points = Vec::new();
    let mut tables = Vec::new();
    for &n in n_list {
        let d = full.select_rows(&(0..n).collect::<Vec<_>>());
        let tree = pipe.tree(&d)?;
        points.push(SweepPoint::from_report(n, &tree.decompose()));
        if with_tests {
            let tree_of = |data: &Dataset, _: u64| pipe.tree(data);
            tables.push(test_all_terms(
                &tree_of,
                &d,
                &taus(spec),
                spec.pipeline.b,
                spec.pipeline.j,
                derive_seed(seed, &format!("tests-n-{n}")),
            )?);
        }
    }
    Ok((points, tables))
}

/// Fraction of adjacent `(n, n′)` pairs, pooled over replicates, where
/// `value` decreases.
fn decreasing_share(reps: &[Vec<SweepPoint>], value: impl Fn(&SweepPoint) -> f64) -> f64 {
    let mut pairs = 0;
    let mut down = 0;
    for r in reps {
        for w in r.windows(2) {
            pairs += 1;
            if value(&w[1]) < value(&w[0]) {
                down += 1;
            }
        }
    }
    if pairs == 0 {
        f64::NAN
    } else {
        down as f64 / pairs as f64
    }
}

/// Per-n decomposition over `replicates` simulated datasets (each nested in
/// n), tests on the first replicate, and median curves.
pub fn run_n_sweep(spec: &ScenarioSpec) -> Result<StudyOutput> {
    spec.validate()?;
    check_test_sizes(spec)?;
    let seed = spec.seed()?;
    let s = scenario_from(spec)?;
    let n_list = spec
        .generator
        .n_list
        .clone()
        .unwrap_or_else(|| (2..=12).map(|k| 10 * k).collect());
    let results: Vec<(Vec<SweepPoint>, Vec<TermTestTable>)> = (0..spec.replicates)
        .into_par_iter()
        .map(|r| {
            sweep_replicate(
                spec,
                &s,
                &n_list,
                replicate_seed(seed, r),
                r == 0 && spec.pipeline.test,
            )
        })
        .collect::<Result<_>>()?;
    let reps: Vec<Vec<SweepPoint>> = results.iter().map(|(p, _)| p.clone()).collect();

    let medians: Vec<SweepPoint> = (0..n_list.len())
        .map(|k| {
            let col = |f: &dyn Fn(&SweepPoint) -> f64| {
                median(&reps.iter().map(|r| f(&r[k])).collect::<Vec<_>>())
            };
            SweepPoint {
                n: n_list[k],
                total: col(&|p| p.total),
                values: (0..3).map(|t| col(&|p| p.values[t])).collect(),
                proportions: (0..3).map(|t| col(&|p| p.proportions[t])).collect(),
            }
        })
        .collect();

    let mut files = vec![(
        "curves.csv".to_string(),
        numeric_csv(
            &CURVE_HEADER,
            &medians.iter().map(SweepPoint::row).collect::<Vec<_>>(),
        )?,
    )];
    let mut header = vec!["replicate"];
    header.extend(CURVE_HEADER);
    let rows: Vec<Vec<f64>> = reps
        .iter()
        .enumerate()
        .flat_map(|(r, pts)| {
            pts.iter().map(move |p| {
                let mut row = vec![r as f64];
                row.extend(p.row());
                row
            })
        })
        .collect();
    files.push((
        "curves_replicates.csv".to_string(),
        numeric_csv(&header, &rows)?,
    ));
    if spec.pipeline.test {
        let labels: Vec<String> = n_list.iter().map(|n| n.to_string()).collect();
        files.push((
            "sample_size_tests.csv".to_string(),
            sweep_tests_csv(&labels, &results[0].1)?,
        ));
    }
    let summary = json!({
        "study": StudyKind::NSweep.name(),
        "seed": seed,
        "replicates": reps.len(),
        "scenario": s,
        "n_list": n_list,
        "median": medians,
        "models_proportion_decreasing_pairs": decreasing_share(&reps, |p| p.proportions[1]),
        "total_decreasing_pairs": decreasing_share(&reps, |p| p.total),
        "tests": results[0].1.iter().map(test_summary).collect::<Vec<_>>(),
    });
    Ok(StudyOutput {
        study: StudyKind::NSweep,
        files,
        summary,
    })
}
