//! Browser bindings: mixture prediction intervals, tree decompositions and
//! the Box approximation. Every export takes and returns plain numbers or
//! JSON strings so the page needs no bundler.

use panova::decompose::box_gh;
use panova::intervals::prediction_interval;
use panova::{ComponentPredictive, FactorTree, PredictiveMixture};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Gaussian mixture summary as JSON: mean, variance, between and within
/// parts, and the central `1 − alpha` interval.
pub fn mixture_summary(
    weights: &[f64],
    means: &[f64],
    variances: &[f64],
    alpha: f64,
) -> panova::Result<String> {
    if means.len() != weights.len() || variances.len() != weights.len() {
        return Err(panova::Error::InvalidArgument(format!(
            "{} weights, {} means, {} variances",
            weights.len(),
            means.len(),
            variances.len()
        )));
    }
    let components = means
        .iter()
        .zip(variances)
        .map(|(&m, &v)| ComponentPredictive::gaussian(m, v))
        .collect::<panova::Result<Vec<_>>>()?;
    let mix = PredictiveMixture::new(weights.to_vec(), components)?;
    let (within, between) = panova::two_term_decompose(&mix);
    let pi = prediction_interval(&mix, alpha)?;
    Ok(json!({
        "mean": mix.mean(),
        "variance": mix.variance(),
        "between": between,
        "within": within,
        "lower": pi.lower,
        "upper": pi.upper,
    })
    .to_string())
}

/// Decomposition report of a tree given as JSON.
pub fn tree_report(tree_json: &str) -> panova::Result<String> {
    let tree: FactorTree =
        serde_json::from_str(tree_json).map_err(|e| panova::Error::Format(e.to_string()))?;
    let report = tree.decompose();
    Ok(serde_json::to_string(&report).expect("report serializes"))
}

/// Box's `g`, `h` and the implied mean and variance for the given eigenvalues.
pub fn box_summary(eigenvalues: &[f64]) -> panova::Result<String> {
    let b = box_gh(eigenvalues)?;
    Ok(json!({"g": b.g, "h": b.h, "mean": b.mean(), "variance": b.variance()}).to_string())
}

#[wasm_bindgen(js_name = mixtureInterval)]
pub fn mixture_interval(
    weights: &[f64],
    means: &[f64],
    variances: &[f64],
    alpha: f64,
) -> Result<String, JsError> {
    mixture_summary(weights, means, variances, alpha).map_err(js_err)
}

#[wasm_bindgen(js_name = decomposeTree)]
pub fn decompose_tree(tree_json: &str) -> Result<String, JsError> {
    tree_report(tree_json).map_err(js_err)
}

#[wasm_bindgen(js_name = boxApprox)]
pub fn box_approx(eigenvalues: &[f64]) -> Result<String, JsError> {
    box_summary(eigenvalues).map_err(js_err)
}
