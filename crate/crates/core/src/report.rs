//! CSV and JSON renderings of decompositions, test tables and model-list
//! reports. Numeric columns are written with 17 significant digits; tables
//! that are read by people also carry a rounded companion column.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::intervals::ModelListReport;
use crate::numeric::{fmt_full, fmt_rounded};
use crate::tree::DecompositionReport;
use crate::vartest::{TermTestTable, TestOutcome};

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Up to three significant digits with trailing zeros removed, as in
/// "0.04 (1,0.034,0)".
pub fn compact(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (2 - mag).clamp(0, 12) as usize;
    let s = format!("{:.*}", decimals, x);
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Source / interpretation / variance / proportion rows and a total row.
pub fn decomposition_csv(report: &DecompositionReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "source",
        "interpretation",
        "variance",
        "proportion",
        "variance_rounded",
        "proportion_rounded",
    ])?;
    for t in &report.terms {
        w.write_record([
            t.source.as_str(),
            t.interpretation.as_str(),
            &fmt_full(t.variance),
            &fmt_full(t.proportion),
            &fmt_rounded(t.variance),
            &fmt_rounded(t.proportion),
        ])?;
    }
    let total_prop: f64 = report.terms.iter().map(|t| t.proportion).sum();
    w.write_record([
        "Total",
        "Predictive variance",
        &fmt_full(report.total),
        &fmt_full(total_prop),
        &fmt_rounded(report.total),
        &fmt_rounded(total_prop),
    ])?;
    finish(w)
}

/// `z̄ (ASL_τ1, ASL_τ2, …)`.
pub fn test_cell(outcomes: &[TestOutcome]) -> String {
    let z = outcomes.first().map(|o| o.z_bar).unwrap_or(f64::NAN);
    let asls: Vec<String> = outcomes.iter().map(|o| compact(o.asl)).collect();
    format!("{} ({})", compact(z), asls.join(","))
}

/// One row per term with z̄, the ASL at each τ and the combined cell.
pub fn term_tests_csv(table: &TermTestTable) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["source".to_string(), "z_bar".to_string()];
    header.extend(table.taus.iter().map(|t| format!("asl_tau_{t}")));
    header.push("cell".into());
    w.write_record(&header)?;
    for (term, outcomes) in table.report.terms.iter().zip(&table.outcomes) {
        let mut row = vec![term.source.clone(), fmt_full(outcomes[0].z_bar)];
        row.extend(outcomes.iter().map(|o| fmt_full(o.asl)));
        row.push(test_cell(outcomes));
        w.write_record(&row)?;
    }
    finish(w)
}

/// A table shaped like rows = labels, one cell per term:
/// `label, <term>_z_bar, <term>_asl_<τ>…, <term>_cell…`.
pub fn sweep_tests_csv(labels: &[String], tables: &[TermTestTable]) -> Result<String> {
    let first = tables
        .first()
        .ok_or_else(|| Error::InvalidArgument("no test tables".into()))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["row".to_string()];
    for term in &first.report.terms {
        let s = term.source.to_lowercase().replace(' ', "_");
        header.push(format!("{s}_z_bar"));
        header.extend(first.taus.iter().map(|t| format!("{s}_asl_tau_{t}")));
        header.push(format!("{s}_cell"));
    }
    w.write_record(&header)?;
    for (label, t) in labels.iter().zip(tables) {
        let mut row = vec![label.clone()];
        for outcomes in &t.outcomes {
            row.push(fmt_full(outcomes[0].z_bar));
            row.extend(outcomes.iter().map(|o| fmt_full(o.asl)));
            row.push(test_cell(outcomes));
        }
        w.write_record(&row)?;
    }
    finish(w)
}

/// tau / z̄ / ASL / decision rows for one ratio sample set.
pub fn tau_sweep_csv(outcomes: &[TestOutcome]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["tau", "z_bar", "asl", "reject", "asl_rounded"])?;
    for o in outcomes {
        w.write_record([
            fmt_full(o.tau),
            fmt_full(o.z_bar),
            fmt_full(o.asl),
            o.rejects().to_string(),
            compact(o.asl),
        ])?;
    }
    finish(w)
}

/// candidate / coverage / variance / chosen rows.
pub fn model_list_csv(report: &ModelListReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "candidate",
        "coverage",
        "variance",
        "chosen",
        "coverage_rounded",
        "variance_rounded",
    ])?;
    for (i, r) in report.rows.iter().enumerate() {
        w.write_record([
            r.candidate.clone(),
            fmt_full(r.coverage),
            fmt_full(r.variance),
            (i == report.chosen).to_string(),
            fmt_rounded(r.coverage),
            fmt_rounded(r.variance),
        ])?;
    }
    finish(w)
}

/// Writes a header and rows of numbers in full precision.
pub fn numeric_csv(header: &[&str], rows: &[Vec<f64>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|v| fmt_full(*v)))?;
    }
    finish(w)
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json(value)?)
}
