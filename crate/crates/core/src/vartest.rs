//! Two-layer bootstrap test of `H0: E[term/total] ≥ τ` against `H1: < τ`.
//!
//! The outer layer recomputes the decomposition on case-resampled datasets to
//! get ratio samples `Z_b`. The inner layer resamples those ratios `J` times
//! under the null and reports the achieved significance level
//! `ASL = #{t̃_j ≤ t} / J` with `t = (z̄ − τ)/SE(z̄)`.
//!
//! Null resamples: recentring each resample by its own mean and τ, then
//! subtracting τ again, makes the numerator of `t̃_j` identically zero. The
//! default [`NullForm::Shift`] instead uses the classical bootstrap-t shift,
//! `t̃_j = (z̄′_j − z̄)/SE(z′_j)`. The literal construction is available as
//! [`NullForm::Literal`]; its ASL is 1 when `t ≥ 0` and 0 otherwise.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decompose::term_diagnostics;
use crate::error::{Error, Result};
use crate::fit::Dataset;
use crate::numeric::{derive_seed, mean, sample_variance, seed_stream};
use crate::tree::{DecompositionReport, FactorTree};

pub const DEFAULT_B: usize = 200;
pub const DEFAULT_J: usize = 10_000;
pub const MIN_J: usize = 1000;
pub const MIN_B: usize = 50;
/// ASL below this rejects H0.
pub const REJECT_LEVEL: f64 = 0.05;
/// Levels reported in the rejection map.
pub const LEVELS: [f64; 3] = [0.01, 0.05, 0.1];

const MAX_REDRAWS: usize = 10;
const PROPORTION_SLACK: f64 = 1e-9;
const INNER_BLOCK: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NullForm {
    #[default]
    Shift,
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub z_samples: Vec<f64>,
    pub z_bar: f64,
    pub se: f64,
    /// `None` when the samples have zero spread.
    pub t_stat: Option<f64>,
    pub tau: f64,
    pub j: usize,
    pub asl: f64,
    pub reject: BTreeMap<String, bool>,
    pub degenerate: bool,
    pub null_form: NullForm,
}

impl TestOutcome {
    /// Decision at the default level.
    pub fn rejects(&self) -> bool {
        self.asl < REJECT_LEVEL
    }
}

fn reject_map(asl: f64) -> BTreeMap<String, bool> {
    LEVELS.iter().map(|l| (format!("{l}"), asl < *l)).collect()
}

/// Shift-form test; see the module docs.
pub fn asl_test(z: &[f64], tau: f64, j: usize, seed: u64) -> Result<TestOutcome> {
    asl_test_with(z, tau, j, seed, NullForm::Shift)
}

pub fn asl_test_with(
    z: &[f64],
    tau: f64,
    j: usize,
    seed: u64,
    form: NullForm,
) -> Result<TestOutcome> {
    let b = z.len();
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 ratio samples, got {b}"
        )));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau {tau} outside (0, 1)")));
    }
    if j < MIN_J {
        return Err(Error::InvalidArgument(format!(
            "J = {j} below the minimum of {MIN_J}"
        )));
    }
    if let Some(bad) = z
        .iter()
        .find(|v| !(**v >= -PROPORTION_SLACK && **v <= 1.0 + PROPORTION_SLACK))
    {
        return Err(Error::InvalidArgument(format!(
            "ratio sample {bad} outside [0, 1]"
        )));
    }
    let z_bar = mean(z);
    let s = sample_variance(z).sqrt();
    let se = s / (b as f64).sqrt();
    if se == 0.0 {
        let asl = if z_bar >= tau { 1.0 } else { 0.0 };
        return Ok(TestOutcome {
            z_samples: z.to_vec(),
            z_bar,
            se,
            t_stat: None,
            tau,
            j,
            asl,
            reject: reject_map(asl),
            degenerate: true,
            null_form: form,
        });
    }
    let t = (z_bar - tau) / se;
    let count: usize = match form {
        NullForm::Literal => {
            if t >= 0.0 {
                j
            } else {
                0
            }
        }
        NullForm::Shift => {
            let base = derive_seed(seed, "null-resamples");
            let blocks = j.div_ceil(INNER_BLOCK);
            (0..blocks)
                .into_par_iter()
                .map(|blk| {
                    let mut rng = seed_stream(base, blk as u64);
                    let lo = blk * INNER_BLOCK;
                    let hi = (lo + INNER_BLOCK).min(j);
                    let mut buf = vec![0.0; b];
                    let mut hits = 0;
                    for _ in lo..hi {
                        for v in buf.iter_mut() {
                            *v = z[rng.random_range(0..b)];
                        }
                        let m = mean(&buf);
                        let se_r = sample_variance(&buf).sqrt() / (b as f64).sqrt();
                        let num = m - z_bar;
                        let tt = if se_r > 0.0 {
                            num / se_r
                        } else if num == 0.0 {
                            0.0
                        } else {
                            num.signum() * f64::INFINITY
                        };
                        if tt <= t {
                            hits += 1;
                        }
                    }
                    hits
                })
                .sum()
        }
    };
    let asl = count as f64 / j as f64;
    Ok(TestOutcome {
        z_samples: z.to_vec(),
        z_bar,
        se,
        t_stat: Some(t),
        tau,
        j,
        asl,
        reject: reject_map(asl),
        degenerate: false,
        null_form: form,
    })
}

/// Builds a factor tree from a dataset; must be deterministic given
/// `(data, seed)`.
pub trait TreePipeline: Sync {
    fn build(&self, d: &Dataset, seed: u64) -> Result<FactorTree>;
}

impl<F> TreePipeline for F
where
    F: Fn(&Dataset, u64) -> Result<FactorTree> + Sync,
{
    fn build(&self, d: &Dataset, seed: u64) -> Result<FactorTree> {
        self(d, seed)
    }
}

/// Proportions of every term for one tree. All-zero variance gives zeros.
fn proportions(report: &DecompositionReport, index: usize) -> Result<Vec<f64>> {
    report
        .terms
        .iter()
        .map(|t| {
            let p = t.proportion;
            if !(p >= -PROPORTION_SLACK && p <= 1.0 + PROPORTION_SLACK) {
                return Err(Error::InvalidArgument(format!(
                    "replicate {index}: proportion {p} of '{}' outside [0, 1]",
                    t.source
                )));
            }
            Ok(p.clamp(0.0, 1.0))
        })
        .collect()
}

/// Outer bootstrap layer: one tree per case-resampled dataset.
pub fn bootstrap_trees<P: TreePipeline + ?Sized>(
    pipeline: &P,
    d: &Dataset,
    b: usize,
    seed: u64,
) -> Result<Vec<FactorTree>> {
    if b < MIN_B {
        return Err(Error::InvalidArgument(format!(
            "B = {b} below the minimum of {MIN_B}"
        )));
    }
    let base = derive_seed(seed, "outer-resamples");
    let n = d.n();
    (0..b)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed_stream(base, i as u64);
            let mut log = Vec::new();
            for attempt in 0..=MAX_REDRAWS {
                let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let rep_seed = derive_seed(base, &format!("replicate-{i}-{attempt}"));
                match pipeline.build(&d.select_rows(&rows), rep_seed) {
                    Ok(t) => return Ok(t),
                    Err(e) => log.push(e.to_string()),
                }
            }
            Err(Error::ReplicateFailed {
                index: i,
                attempts: log.len(),
                log: log.join("; "),
            })
        })
        .collect()
}

/// `Z_b = term / total` over `b` case-resampled datasets.
pub fn bootstrap_ratio_samples<P: TreePipeline + ?Sized>(
    pipeline: &P,
    d: &Dataset,
    term: usize,
    b: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let trees = bootstrap_trees(pipeline, d, b, seed)?;
    trees
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let props = proportions(&t.decompose(), i)?;
            props.get(term).copied().ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "term {term} requested from a decomposition with {} terms",
                    props.len()
                ))
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermTestTable {
    /// Decomposition of the full-data tree, with replicate diagnostics.
    pub report: DecompositionReport,
    pub taus: Vec<f64>,
    /// `z[term][b]`.
    pub z: Vec<Vec<f64>>,
    /// `outcomes[term][tau]`.
    pub outcomes: Vec<Vec<TestOutcome>>,
}

/// Tests every decomposition term at every τ from one shared set of outer
/// replicates and one shared inner resampling stream.
pub fn test_all_terms<P: TreePipeline + ?Sized>(
    pipeline: &P,
    d: &Dataset,
    taus: &[f64],
    b: usize,
    j: usize,
    seed: u64,
) -> Result<TermTestTable> {
    if taus.is_empty() {
        return Err(Error::InvalidArgument("no tau values".into()));
    }
    let full = pipeline.build(d, derive_seed(seed, "full-data"))?;
    let mut report = full.decompose();
    let trees = bootstrap_trees(pipeline, d, b, seed)?;
    let props: Vec<Vec<f64>> = trees
        .iter()
        .enumerate()
        .map(|(i, t)| proportions(&t.decompose(), i))
        .collect::<Result<_>>()?;
    let terms = report.terms.len();
    if props.iter().any(|p| p.len() != terms) {
        return Err(Error::Dimension(
            "replicate trees have a different depth".into(),
        ));
    }
    let z: Vec<Vec<f64>> = (0..terms)
        .map(|k| props.iter().map(|p| p[k]).collect())
        .collect();
    let inner = derive_seed(seed, "inner");
    let outcomes = z
        .iter()
        .map(|zk| {
            taus.iter()
                .map(|&tau| asl_test(zk, tau, j, inner))
                .collect()
        })
        .collect::<Result<Vec<Vec<_>>>>()?;
    if trees
        .iter()
        .all(|t| t.level_counts() == full.level_counts())
    {
        report.diagnostics = term_diagnostics(&full, &trees).ok();
    }
    Ok(TermTestTable {
        report,
        taus: taus.to_vec(),
        z,
        outcomes,
    })
}

/// Reads ratio samples: one number per line, with blank lines, `#` comments
/// and a single leading non-numeric header line ignored. Values must lie in
/// [0, 1].
pub fn read_z_samples<R: std::io::BufRead>(reader: R) -> Result<Vec<f64>> {
    let mut z = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        match text.parse::<f64>() {
            Ok(v) if (0.0..=1.0).contains(&v) => z.push(v),
            Ok(v) => {
                return Err(Error::Format(format!(
                    "line {}: ratio {v} outside [0, 1]",
                    i + 1
                )))
            }
            Err(_) if z.is_empty() && i == 0 => continue,
            Err(_) => {
                return Err(Error::Format(format!(
                    "line {}: '{text}' is not a number",
                    i + 1
                )))
            }
        }
    }
    if z.len() < 2 {
        return Err(Error::Format(format!(
            "{} ratio sample(s); at least 2 needed",
            z.len()
        )));
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::ComponentPredictive;
    use crate::tree::TreeNode;
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn data(n: usize) -> Dataset {
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64);
        let y = DVector::from_fn(n, |i, _| (i * i % 7) as f64);
        Dataset::new(x, y).unwrap()
    }

    #[test]
    fn far_below_tau_rejects() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z: Vec<f64> = (0..200)
            .map(|_| 0.001 + 1e-4 * rng.random::<f64>())
            .collect();
        let o = asl_test(&z, 0.05, 10_000, 3).unwrap();
        assert!(o.asl <= 0.01);
        assert!(o.rejects());
        assert!(o.reject["0.05"]);
    }

    #[test]
    fn far_above_tau_retains() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z: Vec<f64> = (0..200)
            .map(|_| 0.86 + 0.05 * (rng.random::<f64>() - 0.5))
            .collect();
        let o = asl_test(&z, 0.05, 10_000, 3).unwrap();
        assert!(o.asl >= 0.99);
        assert!(!o.rejects());
    }

    #[test]
    fn degenerate_samples() {
        let o = asl_test(&[0.0; 50], 0.05, 1000, 1).unwrap();
        assert!(o.degenerate);
        assert_eq!(o.asl, 0.0);
        let o = asl_test(&[0.3; 50], 0.05, 1000, 1).unwrap();
        assert_eq!(o.asl, 1.0);
    }

    #[test]
    fn argument_checks() {
        assert!(asl_test(&[0.1], 0.05, 1000, 1).is_err());
        assert!(asl_test(&[0.1, 0.2], 0.05, 999, 1).is_err());
        assert!(asl_test(&[0.1, 0.2], 1.0, 1000, 1).is_err());
        assert!(asl_test(&[0.1, 1.2], 0.5, 1000, 1).is_err());
    }

    #[test]
    fn literal_form_is_a_sign_test() {
        let z = [0.1, 0.2, 0.3, 0.15];
        assert_eq!(
            asl_test_with(&z, 0.1, 1000, 1, NullForm::Literal)
                .unwrap()
                .asl,
            1.0
        );
        assert_eq!(
            asl_test_with(&z, 0.5, 1000, 1, NullForm::Literal)
                .unwrap()
                .asl,
            0.0
        );
    }

    #[test]
    fn deterministic_and_monotone_in_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z: Vec<f64> = (0..100).map(|_| rng.random::<f64>() * 0.2).collect();
        let a = asl_test(&z, 0.1, 2000, 9).unwrap();
        assert_eq!(a, asl_test(&z, 0.1, 2000, 9).unwrap());
        let mut prev = 1.0;
        for k in 1..20 {
            let asl = asl_test(&z, k as f64 * 0.01, 2000, 9).unwrap().asl;
            assert!(asl <= prev);
            prev = asl;
        }
    }

    #[test]
    fn single_model_pipeline_gives_zero_between_ratios() {
        let d = data(30);
        let pipe = |d: &Dataset, _s: u64| {
            let m = d.y().mean();
            FactorTree::from_root_unnamed(TreeNode::Branch(vec![(
                1.0,
                TreeNode::Leaf(ComponentPredictive::gaussian(m, 1.0)?),
            )]))
        };
        let z = bootstrap_ratio_samples(&pipe, &d, 0, 50, 1).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        let table = test_all_terms(&pipe, &d, &[0.01, 0.05, 0.1], 50, 1000, 1).unwrap();
        for o in &table.outcomes[0] {
            assert_eq!(o.asl, 0.0);
        }
    }

    #[test]
    fn fixed_tree_pipeline_gives_identical_ratios() {
        let d = data(30);
        let pipe = |_d: &Dataset, _s: u64| {
            FactorTree::from_root_unnamed(TreeNode::Branch(vec![
                (
                    0.4,
                    TreeNode::Leaf(ComponentPredictive::gaussian(0.0, 1.0)?),
                ),
                (
                    0.6,
                    TreeNode::Leaf(ComponentPredictive::gaussian(2.0, 1.0)?),
                ),
            ]))
        };
        let z = bootstrap_ratio_samples(&pipe, &d, 0, 60, 5).unwrap();
        assert!(z.iter().all(|v| *v == z[0]));
        assert!((z[0] - 0.96 / 1.96).abs() < 1e-12);
    }

    #[test]
    fn failing_replicates_are_reported() {
        let d = data(20);
        let pipe = |_d: &Dataset, _s: u64| -> Result<FactorTree> {
            Err(Error::InvalidTree("always fails".into()))
        };
        match bootstrap_ratio_samples(&pipe, &d, 0, 50, 1) {
            Err(Error::ReplicateFailed { attempts, .. }) => assert_eq!(attempts, MAX_REDRAWS + 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn z_files_parse_with_header_and_comments() {
        let z = read_z_samples("z\n# outer replicates\n0.1\n\n0.25\n".as_bytes()).unwrap();
        assert_eq!(z, vec![0.1, 0.25]);
        let e = read_z_samples("0.1\nabc\n".as_bytes()).unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert!(read_z_samples("0.1\n1.5\n".as_bytes()).is_err());
        assert!(read_z_samples("z\n0.3\n".as_bytes()).is_err());
    }
}
