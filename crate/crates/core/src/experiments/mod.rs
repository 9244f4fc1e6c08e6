//! End-to-end studies driven by a JSON scenario file: the shrinkage/stacking
//! simulation, the links × variable-sets binomial grid and its sample-size
//! sweep, and stacking over externally produced predictions.
//!
//! Every study returns its tables as in-memory CSV text so that runs can be
//! compared byte for byte; [`write_outputs`] puts them on disk next to a run
//! manifest whose timing block is the only non-reproducible part.

mod binomial;
mod external;
mod shrinkage;

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{LambdaRule, Link, PenaltyKind};
use crate::mixture::ComponentPredictive;
use crate::numeric::{fmt_full, fmt_rounded};
use crate::report::write_text;
use crate::tree::FactorTree;
use crate::vartest::{NullForm, DEFAULT_B, DEFAULT_J};

pub use binomial::{
    generate_binomial, run_binomial_grid_study, run_n_sweep, BinomialScenario, GridFit,
    GridPipeline, SweepPoint, Target,
};
pub use external::{
    read_heldout, read_oof_predictions, run_external_stacking_study, ExternalModels,
};
pub use shrinkage::{
    empirical_quantile, fit_stack, generate_linear, largest_remainder, run_shrinkage_study,
    LinearDraw, LinearScenario, MethodFit, ShrinkageReplicate, ShrinkageSettings, StackedFit,
    Tuned,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Shrinkage,
    BinomialGrid,
    NSweep,
    ExternalStacking,
}

impl StudyKind {
    pub const ALL: [StudyKind; 4] = [
        StudyKind::Shrinkage,
        StudyKind::BinomialGrid,
        StudyKind::NSweep,
        StudyKind::ExternalStacking,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StudyKind::Shrinkage => "shrinkage",
            StudyKind::BinomialGrid => "binomial_grid",
            StudyKind::NSweep => "n_sweep",
            StudyKind::ExternalStacking => "external_stacking",
        }
    }

    pub fn available() -> String {
        Self::ALL.map(Self::name).join(", ")
    }
}

impl FromStr for StudyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown study '{s}'; available: {}",
                    Self::available()
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageMode {
    /// Fresh outcomes at the new point, interval fixed from the full data.
    #[default]
    Fresh,
    /// One fresh outcome per case-resampled rerun of the whole pipeline.
    Bootstrap,
}

/// Data-generating parameters. Unset fields take the study's defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub n: Option<usize>,
    pub p: Option<usize>,
    pub nonzero: Option<usize>,
    pub beta_mean: Option<f64>,
    pub beta_sd: Option<f64>,
    pub beta: Option<Vec<f64>>,
    pub noise_sd: Option<f64>,
    pub trials: Option<u32>,
    pub link: Option<Link>,
    pub n_list: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSpec {
    pub methods: Vec<PenaltyKind>,
    pub folds: usize,
    pub enet_alpha: f64,
    pub lambda_rule: LambdaRule,
    pub variance_bootstrap: usize,
    pub eval_draws: usize,
    pub coverage_draws: usize,
    pub coverage: CoverageMode,
    /// Re-select λ inside every bootstrap replicate instead of reusing the
    /// full-data choice.
    pub refit_lambda: bool,
    /// Run the bootstrap test(s); the decomposition is always reported.
    pub test: bool,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "J")]
    pub j: usize,
    pub taus: Option<Vec<f64>>,
    pub alpha: f64,
    pub delta: f64,
    pub null_form: NullForm,
    pub links: Vec<Link>,
    pub variables: Option<Vec<String>>,
    pub max_set_size: Option<usize>,
    /// Binomial leaf; `count` for the grid study, `mean_count` for the sweep.
    pub target: Option<Target>,
    pub link_prior: Option<Vec<f64>>,
    pub set_prior: Option<Vec<f64>>,
}

impl Default for PipelineSpec {
    fn default() -> Self {
        Self {
            methods: vec![
                PenaltyKind::Lasso,
                PenaltyKind::Ridge,
                PenaltyKind::Alasso,
                PenaltyKind::Enet,
                PenaltyKind::Aenet,
            ],
            folds: 5,
            enet_alpha: 0.5,
            lambda_rule: LambdaRule::Min,
            variance_bootstrap: 100,
            eval_draws: 100_000,
            coverage_draws: 1000,
            coverage: CoverageMode::Fresh,
            refit_lambda: false,
            test: true,
            b: DEFAULT_B,
            j: DEFAULT_J,
            taus: None,
            alpha: 0.05,
            delta: 0.02,
            null_form: NullForm::Shift,
            links: Link::ALL.to_vec(),
            variables: None,
            max_set_size: None,
            target: None,
            link_prior: None,
            set_prior: None,
        }
    }
}

/// Input files. Relative paths are resolved against the scenario file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputSpec {
    pub data: Option<PathBuf>,
    pub response: Option<String>,
    pub trials: Option<String>,
    pub x_new: Option<Vec<f64>>,
    pub trials_new: Option<u32>,
    /// model, fold, row, prediction
    pub oof_predictions: Option<PathBuf>,
    /// model, mean, variance
    pub heldout: Option<PathBuf>,
    /// model, row, mean, variance, outcome
    pub test_predictions: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "one")]
    pub replicates: usize,
    #[serde(default)]
    pub generator: GeneratorSpec,
    #[serde(default)]
    pub pipeline: PipelineSpec,
    #[serde(default)]
    pub inputs: InputSpec,
}

fn one() -> usize {
    1
}

impl ScenarioSpec {
    pub fn new(kind: StudyKind, seed: u64) -> Self {
        Self {
            name: kind.name().into(),
            seed: Some(seed),
            replicates: 1,
            generator: GeneratorSpec::default(),
            pipeline: PipelineSpec::default(),
            inputs: InputSpec::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("scenario: {e}")))
    }

    /// Reads a scenario file and resolves its input paths against the file's
    /// directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut spec = Self::from_json(&text)?;
        if let Some(base) = path.parent() {
            spec.inputs.resolve(base);
        }
        Ok(spec)
    }

    pub fn kind(&self) -> Result<StudyKind> {
        self.name.parse()
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a seed is required for every study".into()))
    }

    /// Checks counts and τ values; study-specific checks happen when the
    /// study resolves its settings.
    pub fn validate(&self) -> Result<StudyKind> {
        let kind = self.kind()?;
        self.seed()?;
        let p = &self.pipeline;
        let positive = [
            ("replicates", self.replicates),
            ("folds", p.folds),
            ("variance_bootstrap", p.variance_bootstrap),
            ("eval_draws", p.eval_draws),
            ("coverage_draws", p.coverage_draws),
            ("B", p.b),
            ("J", p.j),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if let Some(taus) = &p.taus {
            if taus.is_empty() {
                return Err(Error::Config("taus is empty".into()));
            }
            if let Some(t) = taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
                return Err(Error::Config(format!("tau {t} outside (0, 1)")));
            }
        }
        if !(p.alpha > 0.0 && p.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1)", p.alpha)));
        }
        if !(p.delta > 0.0) {
            return Err(Error::Config(format!("delta {} must be positive", p.delta)));
        }
        if !(p.enet_alpha > 0.0 && p.enet_alpha < 1.0) {
            return Err(Error::Config(format!(
                "enet_alpha {} outside (0, 1)",
                p.enet_alpha
            )));
        }
        if p.methods.is_empty() {
            return Err(Error::Config("no methods listed".into()));
        }
        if p.links.is_empty() {
            return Err(Error::Config("no links listed".into()));
        }
        let g = &self.generator;
        for (name, v) in [("n", g.n), ("p", g.p)] {
            if v == Some(0) {
                return Err(Error::Config(format!("generator {name} must be positive")));
            }
        }
        if g.trials == Some(0) {
            return Err(Error::Config("generator trials must be positive".into()));
        }
        if let Some(list) = &g.n_list {
            if list.is_empty() || list.contains(&0) {
                return Err(Error::Config("n_list must hold positive sizes".into()));
            }
            if list.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Config("n_list must be strictly ascending".into()));
            }
        }
        Ok(kind)
    }
}

impl InputSpec {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.data,
            &mut self.oof_predictions,
            &mut self.heldout,
            &mut self.test_predictions,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Named CSV tables plus a JSON summary.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyOutput {
    pub study: StudyKind,
    pub files: Vec<(String, String)>,
    pub summary: serde_json::Value,
}

impl StudyOutput {
    pub fn file(&self, name: &str) -> Option<&str> {
        self.files
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.as_str())
    }
}

/// Runs the study named by the scenario.
pub fn run_study(spec: &ScenarioSpec) -> Result<StudyOutput> {
    match spec.validate()? {
        StudyKind::Shrinkage => run_shrinkage_study(spec),
        StudyKind::BinomialGrid => run_binomial_grid_study(spec),
        StudyKind::NSweep => run_n_sweep(spec),
        StudyKind::ExternalStacking => run_external_stacking_study(spec),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub study: String,
    pub seed: u64,
    pub version: String,
    pub spec: ScenarioSpec,
    pub outputs: Vec<String>,
    /// Wall-clock data; excluded from reproducibility comparisons.
    pub timing: Timing,
}

#[derive(Clone, Debug, Serialize)]
pub struct Timing {
    pub started_unix: u64,
    pub runtime_seconds: f64,
    pub threads: usize,
}

/// Runs a study and writes its tables, `summary.json` and `manifest.json`
/// into `out`.
pub fn run_and_write(spec: &ScenarioSpec, out: &Path) -> Result<RunManifest> {
    let started_unix = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let clock = Instant::now();
    let output = run_study(spec)?;
    let timing = Timing {
        started_unix,
        runtime_seconds: clock.elapsed().as_secs_f64(),
        threads: rayon::current_num_threads(),
    };
    write_outputs(spec, &output, out, timing)
}

pub fn write_outputs(
    spec: &ScenarioSpec,
    output: &StudyOutput,
    out: &Path,
    timing: Timing,
) -> Result<RunManifest> {
    let mut names = Vec::new();
    for (name, text) in &output.files {
        write_text(&out.join(name), text)?;
        names.push(name.clone());
    }
    write_text(
        &out.join("summary.json"),
        &serde_json::to_string_pretty(&output.summary)?,
    )?;
    names.push("summary.json".into());
    let manifest = RunManifest {
        study: output.study.name().into(),
        seed: spec.seed()?,
        version: env!("CARGO_PKG_VERSION").into(),
        spec: spec.clone(),
        outputs: names,
        timing,
    };
    write_text(
        &out.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// One-factor tree over named models.
pub(crate) fn model_tree(
    names: &[String],
    weights: &[f64],
    leaves: Vec<ComponentPredictive>,
) -> Result<FactorTree> {
    FactorTree::new(
        vec!["Model".into()],
        vec![names.to_vec()],
        vec![weights.to_vec()],
        leaves,
    )
}

/// Rows "Stacking weights", "Pred. Variance", "Coverage" over the stacked
/// average and each model, with rounded companion columns. `variances` and
/// `coverages` hold the stack first.
pub(crate) fn stacking_table_csv(
    models: &[String],
    weights: &[f64],
    variances: &[f64],
    coverages: Option<&[f64]>,
) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut cols = vec!["stack".to_string()];
    cols.extend(models.iter().cloned());
    let mut header = vec!["row".to_string()];
    header.extend(cols.iter().cloned());
    header.extend(cols.iter().map(|c| format!("{c}_rounded")));
    w.write_record(&header)?;
    let mut row = |label: &str, values: Vec<Option<f64>>| -> Result<()> {
        let mut r = vec![label.to_string()];
        r.extend(values.iter().map(|v| v.map(fmt_full).unwrap_or_default()));
        r.extend(
            values
                .iter()
                .map(|v| v.map(fmt_rounded).unwrap_or_default()),
        );
        w.write_record(&r)?;
        Ok(())
    };
    let mut wv = vec![None];
    wv.extend(weights.iter().map(|x| Some(*x)));
    row("Stacking weights", wv)?;
    row(
        "Pred. Variance",
        variances.iter().map(|x| Some(*x)).collect(),
    )?;
    match coverages {
        Some(c) => row("Coverage", c.iter().map(|x| Some(*x)).collect())?,
        None => row("Coverage", vec![None; cols.len()])?,
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub(crate) fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// `0.01, 0.02, …, 0.30`.
pub(crate) fn default_sweep_taus() -> Vec<f64> {
    (1..=30).map(|k| k as f64 / 100.0).collect()
}

/// Smallest τ whose test rejects, scanning in ascending τ.
pub(crate) fn crossing_tau(outcomes: &[crate::vartest::TestOutcome]) -> Option<f64> {
    let mut sorted: Vec<&crate::vartest::TestOutcome> = outcomes.iter().collect();
    sorted.sort_by(|a, b| a.tau.total_cmp(&b.tau));
    sorted.iter().find(|o| o.rejects()).map(|o| o.tau)
}
