//! Stacking over predictions made elsewhere.
//!
//! Out-of-fold predictions give the stacking weights; each model's held-out
//! mean and variance give its Gaussian predictive at the new point. Ratio
//! samples for the test come from case-resampling the out-of-fold matrix and
//! re-solving the stacking problem with the held-out predictives fixed.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::average::stacking_weights;
use crate::error::{Error, Result};
use crate::fit::Dataset;
use crate::intervals::prediction_interval;
use crate::mixture::{ComponentPredictive, PredictiveMixture};
use crate::report::{decomposition_csv, tau_sweep_csv};
use crate::tree::FactorTree;
use crate::vartest::{test_all_terms, MIN_B};

use super::{crossing_tau, model_tree, stacking_table_csv, ScenarioSpec, StudyKind, StudyOutput};

/// Out-of-fold prediction matrix and held-out predictives, models in the
/// order they first appear in the prediction file.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalModels {
    pub names: Vec<String>,
    /// rows × models.
    pub oof: DMatrix<f64>,
    pub heldout: Vec<ComponentPredictive>,
}

fn open(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn columns<R: std::io::Read>(
    rdr: &mut csv::Reader<R>,
    wanted: &[&str],
    what: &str,
) -> Result<Vec<usize>> {
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    wanted
        .iter()
        .map(|w| {
            headers
                .iter()
                .position(|h| h == w)
                .ok_or_else(|| Error::Format(format!("{what}: column '{w}' not found in header")))
        })
        .collect()
}

fn field<'a>(rec: &'a csv::StringRecord, col: usize, name: &str, what: &str) -> Result<&'a str> {
    let line = rec.position().map(|p| p.line()).unwrap_or(0);
    match rec.get(col) {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(Error::Format(format!(
            "{what}: line {line}, field '{name}': missing value"
        ))),
    }
}

fn number(rec: &csv::StringRecord, col: usize, name: &str, what: &str) -> Result<f64> {
    let raw = field(rec, col, name, what)?;
    let line = rec.position().map(|p| p.line()).unwrap_or(0);
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| {
            Error::Format(format!(
                "{what}: line {line}, field '{name}': cannot parse '{raw}'"
            ))
        })
}

/// Reads `model, fold, row, prediction` records into an `n × q` matrix. Every
/// model must predict every row `0..n` exactly once.
pub fn read_oof_predictions<R: std::io::Read>(
    reader: R,
    n: usize,
) -> Result<(Vec<String>, DMatrix<f64>)> {
    let what = "out-of-fold predictions";
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let c = columns(&mut rdr, &["model", "fold", "row", "prediction"], what)?;
    let mut names: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let model = field(&rec, c[0], "model", what)?.to_string();
        number(&rec, c[1], "fold", what)?;
        let row = number(&rec, c[2], "row", what)?;
        let pred = number(&rec, c[3], "prediction", what)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if row < 0.0 || row.fract() != 0.0 || row as usize >= n {
            return Err(Error::Dimension(format!(
                "{what}: line {line}: row {row} outside 0..{n}"
            )));
        }
        let j = match names.iter().position(|m| *m == model) {
            Some(j) => j,
            None => {
                names.push(model.clone());
                names.len() - 1
            }
        };
        if cells.insert((row as usize, j), pred).is_some() {
            return Err(Error::Dimension(format!(
                "{what}: line {line}: model '{model}' predicts row {row} twice"
            )));
        }
    }
    if names.is_empty() {
        return Err(Error::Dimension(format!("{what}: no records")));
    }
    for (j, m) in names.iter().enumerate() {
        let count = cells.keys().filter(|(_, k)| *k == j).count();
        if count != n {
            return Err(Error::Dimension(format!(
                "{what}: model '{m}' has {count} rows, the data has {n}"
            )));
        }
    }
    let oof = DMatrix::from_fn(n, names.len(), |i, j| cells[&(i, j)]);
    Ok((names, oof))
}

/// Reads `model, mean, variance`, returning predictives in `names` order.
pub fn read_heldout<R: std::io::Read>(
    reader: R,
    names: &[String],
) -> Result<Vec<ComponentPredictive>> {
    let what = "held-out predictions";
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let c = columns(&mut rdr, &["model", "mean", "variance"], what)?;
    let mut found: BTreeMap<String, ComponentPredictive> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let model = field(&rec, c[0], "model", what)?.to_string();
        let comp = ComponentPredictive::gaussian(
            number(&rec, c[1], "mean", what)?,
            number(&rec, c[2], "variance", what)?,
        )
        .map_err(|e| Error::Format(format!("{what}: model '{model}': {e}")))?;
        if found.insert(model.clone(), comp).is_some() {
            return Err(Error::Format(format!(
                "{what}: model '{model}' listed twice"
            )));
        }
    }
    if found.len() != names.len() {
        return Err(Error::Dimension(format!(
            "{what}: {} models, the out-of-fold file has {}",
            found.len(),
            names.len()
        )));
    }
    names
        .iter()
        .map(|m| {
            found
                .remove(m)
                .ok_or_else(|| Error::Dimension(format!("{what}: no entry for model '{m}'")))
        })
        .collect()
}

/// Coverage of each model's and the stack's central interval over test rows
/// given as `model, row, mean, variance, outcome`. Stack first.
fn test_coverage<R: std::io::Read>(
    reader: R,
    names: &[String],
    weights: &[f64],
    alpha: f64,
) -> Result<Vec<f64>> {
    let what = "test predictions";
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let c = columns(
        &mut rdr,
        &["model", "row", "mean", "variance", "outcome"],
        what,
    )?;
    let mut rows: BTreeMap<usize, (Vec<Option<ComponentPredictive>>, f64)> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let model = field(&rec, c[0], "model", what)?;
        let j = names
            .iter()
            .position(|m| m == model)
            .ok_or_else(|| Error::Dimension(format!("{what}: unknown model '{model}'")))?;
        let row = number(&rec, c[1], "row", what)? as usize;
        let comp = ComponentPredictive::gaussian(
            number(&rec, c[2], "mean", what)?,
            number(&rec, c[3], "variance", what)?,
        )?;
        let y = number(&rec, c[4], "outcome", what)?;
        let entry = rows
            .entry(row)
            .or_insert_with(|| (vec![None; names.len()], y));
        entry.0[j] = Some(comp);
    }
    if rows.is_empty() {
        return Err(Error::Dimension(format!("{what}: no records")));
    }
    let mut hits = vec![0usize; names.len() + 1];
    for (row, (comps, y)) in &rows {
        let comps: Vec<ComponentPredictive> = comps
            .iter()
            .cloned()
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Dimension(format!("{what}: row {row} lacks some models")))?;
        let stack = PredictiveMixture::new(weights.to_vec(), comps.clone())?;
        hits[0] += usize::from(prediction_interval(&stack, alpha)?.contains(*y));
        for (j, comp) in comps.into_iter().enumerate() {
            hits[j + 1] += usize::from(
                prediction_interval(&PredictiveMixture::single(comp), alpha)?.contains(*y),
            );
        }
    }
    Ok(hits.iter().map(|h| *h as f64 / rows.len() as f64).collect())
}

fn stack_tree(
    models: &ExternalModels,
    oof: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<(Vec<f64>, FactorTree)> {
    let w = stacking_weights(oof, y)?.weights;
    let tree = model_tree(&models.names, &w, models.heldout.clone())?;
    Ok((w, tree))
}

pub fn run_external_stacking_study(spec: &ScenarioSpec) -> Result<StudyOutput> {
    spec.validate()?;
    let seed = spec.seed()?;
    let inputs = &spec.inputs;
    let need = |p: &Option<std::path::PathBuf>, what: &str| {
        p.clone().ok_or_else(|| {
            Error::Config(format!("inputs.{what} is required for external_stacking"))
        })
    };
    let data_path = need(&inputs.data, "data")?;
    let response = inputs
        .response
        .as_deref()
        .ok_or_else(|| Error::Config("inputs.response is required with inputs.data".into()))?;
    let y = read_response(&data_path, response)?;
    let n = y.len();
    let oof_path = need(&inputs.oof_predictions, "oof_predictions")?;
    let (names, oof) = read_oof_predictions(open(&oof_path)?.into_inner(), n)?;
    let heldout = read_heldout(
        open(&need(&inputs.heldout, "heldout")?)?.into_inner(),
        &names,
    )?;
    let models = ExternalModels {
        names,
        oof,
        heldout,
    };

    let (weights, tree) = stack_tree(&models, &models.oof, &y)?;
    let report = tree.decompose();
    let mut variances = vec![report.total];
    variances.extend(models.heldout.iter().map(|c| c.variance()));
    let coverages = match &inputs.test_predictions {
        Some(p) => Some(test_coverage(
            open(p)?.into_inner(),
            &models.names,
            &weights,
            spec.pipeline.alpha,
        )?),
        None => None,
    };
    let mut files = vec![
        (
            "stacking_table.csv".to_string(),
            stacking_table_csv(&models.names, &weights, &variances, coverages.as_deref())?,
        ),
        ("decomposition.csv".to_string(), decomposition_csv(&report)?),
    ];
    let mut tau_star = None;
    let mut z_bar = report.terms[0].proportion;
    if spec.pipeline.test {
        if spec.pipeline.b < MIN_B {
            return Err(Error::Config(format!(
                "B = {} below the minimum of {MIN_B}",
                spec.pipeline.b
            )));
        }
        let taus = spec
            .pipeline
            .taus
            .clone()
            .unwrap_or_else(|| (5..=10).map(|k| k as f64 / 100.0).collect());
        let d = Dataset::new(models.oof.clone(), y.clone())?;
        let pipeline = |d: &Dataset, _: u64| stack_tree(&models, d.x(), d.y()).map(|(_, t)| t);
        let table = test_all_terms(&pipeline, &d, &taus, spec.pipeline.b, spec.pipeline.j, seed)?;
        z_bar = table.outcomes[0][0].z_bar;
        tau_star = crossing_tau(&table.outcomes[0]);
        files.push((
            "tau_sweep.csv".to_string(),
            tau_sweep_csv(&table.outcomes[0])?,
        ));
    }
    let summary = json!({
        "study": StudyKind::ExternalStacking.name(),
        "seed": seed,
        "n": n,
        "models": models.names,
        "weights": weights,
        "within": report.terms[1].variance,
        "between": report.terms[0].variance,
        "proportion": report.terms[0].proportion,
        "z_bar": z_bar,
        "tau_star": tau_star,
        "coverages": coverages,
    });
    Ok(StudyOutput {
        study: StudyKind::ExternalStacking,
        files,
        summary,
    })
}

fn read_response(path: &Path, response: &str) -> Result<DVector<f64>> {
    let what = "data";
    let mut rdr = open(path)?;
    let c = columns(&mut rdr, &[response], what)?;
    let ys = rdr
        .records()
        .map(|rec| number(&rec?, c[0], response, what))
        .collect::<Result<Vec<_>>>()?;
    if ys.len() < 2 {
        return Err(Error::InvalidDataset(format!(
            "{} observations, need at least 2",
            ys.len()
        )));
    }
    Ok(DVector::from_vec(ys))
}
