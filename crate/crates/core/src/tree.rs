//! Rectangular factor trees of modelling choices and their K+1 term
//! predictive variance decomposition.
//!
//! A tree with factors `V₁ … V_K` has `m_k` levels at depth `k`. Weights at
//! depth `k` are conditional probabilities (or stacking weights) of a level of
//! `V_k` given the path above it and are stored flat in row-major order over
//! `m₁ × … × m_k`. Leaves are stored the same way over `m₁ × … × m_K`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::decompose::TermDiagnostics;
use crate::error::{Error, Result};
use crate::mixture::{check_simplex, ComponentPredictive, PredictiveMixture, SIMPLEX_TOL};
use crate::numeric::{compensated_sum, weighted_mean};

/// Recursive description used to build trees and to detect ragged input.
#[derive(Clone, Debug)]
pub enum TreeNode {
    Leaf(ComponentPredictive),
    Branch(Vec<(f64, TreeNode)>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorTree {
    factors: Vec<String>,
    levels: Vec<Vec<String>>,
    weights: Vec<Vec<f64>>,
    leaves: Vec<ComponentPredictive>,
}

impl FactorTree {
    /// Builds a tree from flat row-major weights and leaves.
    ///
    /// A tree with no factors is allowed only as the trivial single-leaf tree.
    pub fn new(
        factors: Vec<String>,
        levels: Vec<Vec<String>>,
        weights: Vec<Vec<f64>>,
        leaves: Vec<ComponentPredictive>,
    ) -> Result<Self> {
        let k = factors.len();
        if levels.len() != k || weights.len() != k {
            return Err(Error::InvalidTree(format!(
                "{} factors, {} level lists, {} weight layers",
                k,
                levels.len(),
                weights.len()
            )));
        }
        let mut width = 1usize;
        for (d, lv) in levels.iter().enumerate() {
            if lv.is_empty() {
                return Err(Error::InvalidTree(format!(
                    "factor {} has no levels",
                    factors[d]
                )));
            }
            width *= lv.len();
            if weights[d].len() != width {
                return Err(Error::NonRectangular(format!(
                    "depth {} carries {} weights, expected {}",
                    d + 1,
                    weights[d].len(),
                    width
                )));
            }
            for (g, group) in weights[d].chunks(lv.len()).enumerate() {
                check_simplex(group, SIMPLEX_TOL).map_err(|e| {
                    Error::InvalidWeights(format!("factor {} node {}: {}", factors[d], g, e))
                })?;
            }
        }
        if leaves.len() != width {
            return Err(Error::NonRectangular(format!(
                "{} leaves, expected {}",
                leaves.len(),
                width
            )));
        }
        Ok(Self {
            factors,
            levels,
            weights,
            leaves,
        })
    }

    /// Builds a tree from a nested description; every root-to-leaf path must
    /// have exactly one edge per factor and siblings at a depth must agree in
    /// count with the level list.
    pub fn from_root(
        factors: Vec<String>,
        levels: Vec<Vec<String>>,
        root: TreeNode,
    ) -> Result<Self> {
        let k = factors.len();
        let counts: Vec<usize> = levels.iter().map(Vec::len).collect();
        if counts.len() != k {
            return Err(Error::InvalidTree(
                "level lists do not match factors".into(),
            ));
        }
        let mut weights: Vec<Vec<f64>> = vec![Vec::new(); k];
        let mut leaves = Vec::new();
        collect(&root, 0, &counts, &mut weights, &mut leaves)?;
        Self::new(factors, levels, weights, leaves)
    }

    /// Like [`FactorTree::from_root`] with factors named `V1 … VK` and levels
    /// numbered from 1; the shape is read off the first branch at each depth.
    pub fn from_root_unnamed(root: TreeNode) -> Result<Self> {
        let mut counts = Vec::new();
        let mut node = &root;
        while let TreeNode::Branch(children) = node {
            if children.is_empty() {
                return Err(Error::InvalidTree("branch without children".into()));
            }
            counts.push(children.len());
            node = &children[0].1;
        }
        let factors = (1..=counts.len()).map(|i| format!("V{i}")).collect();
        let levels = counts
            .iter()
            .map(|&m| (1..=m).map(|l| l.to_string()).collect())
            .collect();
        Self::from_root(factors, levels, root)
    }

    pub fn single_leaf(leaf: ComponentPredictive) -> Self {
        Self {
            factors: Vec::new(),
            levels: Vec::new(),
            weights: Vec::new(),
            leaves: vec![leaf],
        }
    }

    pub fn depth(&self) -> usize {
        self.factors.len()
    }

    pub fn factors(&self) -> &[String] {
        &self.factors
    }

    pub fn levels(&self) -> &[Vec<String>] {
        &self.levels
    }

    pub fn level_counts(&self) -> Vec<usize> {
        self.levels.iter().map(Vec::len).collect()
    }

    /// Flat conditional weights of factor `d` (0-based).
    pub fn weights(&self, d: usize) -> &[f64] {
        &self.weights[d]
    }

    pub fn leaves(&self) -> &[ComponentPredictive] {
        &self.leaves
    }

    /// Same shape and weights, new leaves.
    pub fn with_leaves(&self, leaves: Vec<ComponentPredictive>) -> Result<Self> {
        Self::new(
            self.factors.clone(),
            self.levels.clone(),
            self.weights.clone(),
            leaves,
        )
    }

    /// Probability of each node at depth `d` (products of edge weights).
    pub fn path_probabilities(&self, d: usize) -> Vec<f64> {
        let mut probs = vec![1.0];
        for layer in 0..d {
            let m = self.levels[layer].len();
            probs = probs
                .iter()
                .enumerate()
                .flat_map(|(i, p)| {
                    let w = &self.weights[layer][i * m..(i + 1) * m];
                    w.iter().map(move |x| p * x)
                })
                .collect();
        }
        probs
    }

    /// Conditional predictive means `E(Y | V₁ … V_d)` for every node at depth `d`.
    pub fn node_means(&self, d: usize) -> Vec<f64> {
        let mut means: Vec<f64> = self.leaves.iter().map(|l| l.mean()).collect();
        for layer in (d..self.depth()).rev() {
            let m = self.levels[layer].len();
            means = means
                .chunks(m)
                .zip(self.weights[layer].chunks(m))
                .map(|(mu, w)| weighted_mean(mu, w))
                .collect();
        }
        means
    }

    /// The equivalent one-level mixture: leaf weight = product of edge weights.
    pub fn flatten(&self) -> PredictiveMixture {
        let weights = self.path_probabilities(self.depth());
        PredictiveMixture::new(weights, self.leaves.clone())
            .or_else(|_| {
                // Products of valid simplex layers can drift by a few ulps.
                let total = compensated_sum(self.path_probabilities(self.depth()));
                let w = self
                    .path_probabilities(self.depth())
                    .into_iter()
                    .map(|x| x / total)
                    .collect();
                PredictiveMixture::new(w, self.leaves.clone())
            })
            .expect("validated tree flattens to a valid mixture")
    }

    /// The K+1 terms, ordered: between-V₁, between-V₂-within-V₁, …,
    /// between-V_K-within-V_{K−1}…V₁, then the expected leaf variance.
    pub fn decompose(&self) -> DecompositionReport {
        decompose_k(self)
    }
}

fn collect(
    node: &TreeNode,
    depth: usize,
    counts: &[usize],
    weights: &mut [Vec<f64>],
    leaves: &mut Vec<ComponentPredictive>,
) -> Result<()> {
    match node {
        TreeNode::Leaf(c) => {
            if depth != counts.len() {
                return Err(Error::NonRectangular(format!(
                    "leaf at depth {depth}, expected {}",
                    counts.len()
                )));
            }
            leaves.push(c.clone());
        }
        TreeNode::Branch(children) => {
            if depth >= counts.len() {
                return Err(Error::NonRectangular(format!(
                    "branch below the last factor at depth {depth}"
                )));
            }
            if children.len() != counts[depth] {
                return Err(Error::NonRectangular(format!(
                    "node at depth {} has {} children, expected {}",
                    depth,
                    children.len(),
                    counts[depth]
                )));
            }
            for (w, child) in children {
                weights[depth].push(*w);
                collect(child, depth + 1, counts, weights, leaves)?;
            }
        }
    }
    Ok(())
}

/// One row of the decomposition table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceTerm {
    pub source: String,
    pub interpretation: String,
    pub variance: f64,
    pub proportion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub terms: Vec<VarianceTerm>,
    /// Sum of the terms.
    pub total: f64,
    /// Variance of the flattened mixture, computed independently of the terms.
    pub flattened_total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diagnostics: Option<Vec<TermDiagnostics>>,
}

impl DecompositionReport {
    pub fn values(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.variance).collect()
    }

    pub fn proportions(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.proportion).collect()
    }

    /// Sum of every term except the final within-predictions term.
    pub fn between_total(&self) -> f64 {
        let n = self.terms.len();
        compensated_sum(self.terms[..n - 1].iter().map(|t| t.variance))
    }
}

/// Iterated law of total variance over the factors of `tree`.
pub fn decompose_k(tree: &FactorTree) -> DecompositionReport {
    let k = tree.depth();
    let mut values = Vec::with_capacity(k + 1);
    let mut upper_means = tree.node_means(0);
    for d in 0..k {
        let m = tree.levels[d].len();
        let probs = tree.path_probabilities(d);
        let lower_means = tree.node_means(d + 1);
        let term = compensated_sum(probs.iter().enumerate().map(|(i, p)| {
            let w = &tree.weights[d][i * m..(i + 1) * m];
            let mu = &lower_means[i * m..(i + 1) * m];
            p * compensated_sum(w.iter().zip(mu).map(|(wj, mj)| {
                let dev = mj - upper_means[i];
                wj * dev * dev
            }))
        }));
        values.push(term);
        upper_means = lower_means;
    }
    let leaf_probs = tree.path_probabilities(k);
    values.push(compensated_sum(
        leaf_probs
            .iter()
            .zip(&tree.leaves)
            .map(|(p, l)| p * l.variance()),
    ));

    let total = compensated_sum(values.iter().copied());
    let flattened_total = tree.flatten().variance();
    let terms = values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let (source, interpretation) = term_labels(tree, i);
            VarianceTerm {
                source,
                interpretation,
                variance: *v,
                proportion: if total > 0.0 { v / total } else { 0.0 },
            }
        })
        .collect();
    DecompositionReport {
        terms,
        total,
        flattened_total,
        diagnostics: None,
    }
}

fn term_labels(tree: &FactorTree, i: usize) -> (String, String) {
    let k = tree.depth();
    if i == k {
        let within = if k == 0 {
            "single predictive".to_string()
        } else {
            format!("Within {}", tree.factors.join(" "))
        };
        return ("Predictions".into(), within);
    }
    let name = &tree.factors[i];
    if i == 0 {
        (name.clone(), format!("Between {name} variance"))
    } else {
        let outer: Vec<&str> = tree.factors[..i].iter().rev().map(String::as_str).collect();
        (
            name.clone(),
            format!("Between {name} within {}", outer.join(" ")),
        )
    }
}

#[derive(Serialize, Deserialize)]
struct TreeDocument {
    factors: Vec<String>,
    levels: Vec<Vec<String>>,
    weights: Vec<Value>,
    leaves: Vec<ComponentPredictive>,
}

impl Serialize for FactorTree {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let counts = self.level_counts();
        let weights = self
            .weights
            .iter()
            .enumerate()
            .map(|(d, w)| nest(w, &counts[..=d]))
            .collect();
        TreeDocument {
            factors: self.factors.clone(),
            levels: self.levels.clone(),
            weights,
            leaves: self.leaves.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for FactorTree {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = TreeDocument::deserialize(d)?;
        FactorTree::try_from(doc).map_err(serde::de::Error::custom)
    }
}

impl TryFrom<TreeDocument> for FactorTree {
    type Error = Error;

    fn try_from(doc: TreeDocument) -> Result<Self> {
        let counts: Vec<usize> = doc.levels.iter().map(Vec::len).collect();
        if doc.weights.len() != counts.len() {
            return Err(Error::InvalidTree(format!(
                "{} weight layers for {} factors",
                doc.weights.len(),
                counts.len()
            )));
        }
        let mut weights = Vec::with_capacity(counts.len());
        for (d, v) in doc.weights.iter().enumerate() {
            let mut flat = Vec::new();
            unnest(v, &counts[..=d], &mut flat)
                .map_err(|e| Error::NonRectangular(format!("weights[{d}]: {e}")))?;
            weights.push(flat);
        }
        FactorTree::new(doc.factors, doc.levels, weights, doc.leaves)
    }
}

fn nest(values: &[f64], shape: &[usize]) -> Value {
    if shape.len() == 1 {
        return Value::Array(values.iter().map(|v| Value::from(*v)).collect());
    }
    let stride: usize = shape[1..].iter().product();
    Value::Array(
        values
            .chunks(stride)
            .map(|c| nest(c, &shape[1..]))
            .collect(),
    )
}

fn unnest(v: &Value, shape: &[usize], out: &mut Vec<f64>) -> std::result::Result<(), String> {
    let arr = v.as_array().ok_or("expected an array")?;
    if arr.len() != shape[0] {
        return Err(format!(
            "array of length {} where {} expected",
            arr.len(),
            shape[0]
        ));
    }
    for item in arr {
        if shape.len() == 1 {
            out.push(item.as_f64().ok_or("expected a number")?);
        } else {
            unnest(item, &shape[1..], out)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(mu: f64, var: f64) -> TreeNode {
        TreeNode::Leaf(ComponentPredictive::gaussian(mu, var).unwrap())
    }

    fn two_level() -> FactorTree {
        FactorTree::from_root_unnamed(TreeNode::Branch(vec![
            (
                0.4,
                TreeNode::Branch(vec![(0.5, g(0.0, 1.0)), (0.5, g(2.0, 1.0))]),
            ),
            (
                0.6,
                TreeNode::Branch(vec![(0.25, g(3.0, 2.0)), (0.75, g(5.0, 0.5))]),
            ),
        ]))
        .unwrap()
    }

    #[test]
    fn hand_computed_two_level_terms() {
        let r = two_level().decompose();
        // Link means: 1.0 and 4.5, overall 3.1.
        let between_v1 = 0.4 * (1.0f64 - 3.1).powi(2) + 0.6 * (4.5f64 - 3.1).powi(2);
        let between_v2 = 0.4 * (0.5 * 1.0 + 0.5 * 1.0) + 0.6 * (0.25 * 2.25 + 0.75 * 0.25);
        let within = 0.4 * 1.0 + 0.6 * (0.25 * 2.0 + 0.75 * 0.5);
        let v = r.values();
        assert!((v[0] - between_v1).abs() < 1e-14);
        assert!((v[1] - between_v2).abs() < 1e-14);
        assert!((v[2] - within).abs() < 1e-14);
        assert!((r.total - r.flattened_total).abs() < 1e-12);
        assert_eq!(r.terms[1].interpretation, "Between V2 within V1");
        assert_eq!(r.terms[2].source, "Predictions");
    }

    #[test]
    fn identical_leaf_means_give_zero_between() {
        let t = FactorTree::from_root_unnamed(TreeNode::Branch(vec![
            (0.3, g(1.0, 2.0)),
            (0.7, g(1.0, 5.0)),
        ]))
        .unwrap();
        let r = t.decompose();
        assert_eq!(r.values()[0], 0.0);
        assert!((r.values()[1] - 4.1).abs() < 1e-14);
    }

    #[test]
    fn ragged_trees_are_rejected() {
        let ragged = TreeNode::Branch(vec![
            (
                0.5,
                TreeNode::Branch(vec![(0.5, g(0.0, 1.0)), (0.5, g(1.0, 1.0))]),
            ),
            (0.5, TreeNode::Branch(vec![(1.0, g(0.0, 1.0))])),
        ]);
        let err = FactorTree::from_root_unnamed(ragged).unwrap_err();
        assert!(err.to_string().starts_with("non-rectangular factor tree"));
        let short = TreeNode::Branch(vec![
            (
                0.5,
                TreeNode::Branch(vec![(0.5, g(0.0, 1.0)), (0.5, g(1.0, 1.0))]),
            ),
            (0.5, g(0.0, 1.0)),
        ]);
        assert!(matches!(
            FactorTree::from_root_unnamed(short),
            Err(Error::NonRectangular(_))
        ));
    }

    #[test]
    fn weights_must_be_on_simplex() {
        let bad = TreeNode::Branch(vec![(0.5, g(0.0, 1.0)), (0.4, g(1.0, 1.0))]);
        assert!(matches!(
            FactorTree::from_root_unnamed(bad),
            Err(Error::InvalidWeights(_))
        ));
    }

    #[test]
    fn degenerate_weight_collapses_to_leaf() {
        let t = FactorTree::from_root_unnamed(TreeNode::Branch(vec![
            (
                0.0,
                TreeNode::Branch(vec![(1.0, g(-4.0, 9.0)), (0.0, g(8.0, 1.0))]),
            ),
            (
                1.0,
                TreeNode::Branch(vec![(0.0, g(3.0, 2.0)), (1.0, g(5.0, 0.5))]),
            ),
        ]))
        .unwrap();
        let r = t.decompose();
        assert_eq!(r.values(), vec![0.0, 0.0, 0.5]);
        assert_eq!(r.total, 0.5);
    }

    #[test]
    fn single_leaf_has_one_row() {
        let t = FactorTree::single_leaf(ComponentPredictive::gaussian(1.0, 2.0).unwrap());
        let r = t.decompose();
        assert_eq!(r.terms.len(), 1);
        assert_eq!(r.terms[0].proportion, 1.0);
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let t = two_level();
        let text = serde_json::to_string(&t).unwrap();
        assert!(text.contains("\"weights\":[[0.4,0.6],[[0.5,0.5],[0.25,0.75]]]"));
        let back: FactorTree = serde_json::from_str(&text).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn ragged_json_is_rejected() {
        let text = r#"{"factors":["a","b"],"levels":[["x","y"],["p","q"]],
            "weights":[[0.5,0.5],[[0.5,0.5],[1.0]]],
            "leaves":[]}"#;
        let err = serde_json::from_str::<FactorTree>(text).unwrap_err();
        assert!(err.to_string().contains("non-rectangular"));
    }
}
