//! Quadratic-form view of the decomposition terms, eigenvalues of `AΣ`, and
//! the two-moment `g·χ²(h)` approximation of weighted χ²₁ sums.
//!
//! Every between-type term is a probability-weighted sum over the nodes at
//! one depth of `ŶᵀAŶ`, where `Ŷ` holds the children's conditional means
//! centred at the node mean and `A = D_W D_Wᵀ` with `D_W = diag(√ω)` built
//! from the children's conditional weights. The residual term is the
//! weighted expected squared error about each leaf mean.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::numeric::compensated_sum;
use crate::tree::FactorTree;

/// `ŶᵀAŶ` at one node, scaled in the decomposition by `outer_weight`.
#[derive(Clone, Debug)]
pub struct QuadraticFormTerm {
    /// 0-based factor whose levels index `centered`.
    pub factor: usize,
    /// Row-major index of the parent node at depth `factor`.
    pub node: usize,
    /// Probability of reaching the parent node.
    pub outer_weight: f64,
    /// `√ω` for the children of the node.
    pub root_weights: Vec<f64>,
    pub matrix: DMatrix<f64>,
    pub centered: DVector<f64>,
    pub value: f64,
}

impl QuadraticFormTerm {
    /// Builds the form for children with conditional weights `weights` and
    /// conditional means `means` about `parent_mean`.
    pub fn new(
        factor: usize,
        node: usize,
        outer_weight: f64,
        weights: &[f64],
        means: &[f64],
        parent_mean: f64,
    ) -> Self {
        let root_weights: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
        let d = DMatrix::from_diagonal(&DVector::from_vec(root_weights.clone()));
        let matrix = &d * d.transpose();
        let centered = DVector::from_iterator(means.len(), means.iter().map(|m| m - parent_mean));
        let value = centered.dot(&(&matrix * &centered));
        Self {
            factor,
            node,
            outer_weight,
            root_weights,
            matrix,
            centered,
            value,
        }
    }
}

/// All quadratic forms of a tree plus the residual expectation term.
#[derive(Clone, Debug)]
pub struct QuadraticForms {
    /// `forms[k]` holds one form per node at depth `k`.
    pub forms: Vec<Vec<QuadraticFormTerm>>,
    /// `Σ P(leaf) E[(Y − ŷ_leaf)²]`.
    pub residual: f64,
}

impl QuadraticForms {
    /// Reconstructed decomposition terms, in the same order as the report.
    pub fn term_values(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .forms
            .iter()
            .map(|level| compensated_sum(level.iter().map(|q| q.outer_weight * q.value)))
            .collect();
        v.push(self.residual);
        v
    }

    pub fn total(&self) -> f64 {
        compensated_sum(self.term_values())
    }
}

pub fn quadratic_forms(tree: &FactorTree) -> QuadraticForms {
    let k = tree.depth();
    let mut forms = Vec::with_capacity(k);
    for d in 0..k {
        let m = tree.levels()[d].len();
        let probs = tree.path_probabilities(d);
        let parents = tree.node_means(d);
        let children = tree.node_means(d + 1);
        let weights = tree.weights(d);
        let level = probs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                QuadraticFormTerm::new(
                    d,
                    i,
                    *p,
                    &weights[i * m..(i + 1) * m],
                    &children[i * m..(i + 1) * m],
                    parents[i],
                )
            })
            .collect();
        forms.push(level);
    }
    let leaf_probs = tree.path_probabilities(k);
    // E[(Y − ŷ)²] about the component's own mean is its variance.
    let residual = compensated_sum(
        leaf_probs
            .iter()
            .zip(tree.leaves())
            .map(|(p, l)| p * l.variance()),
    );
    QuadraticForms { forms, residual }
}

/// Scaled chi-squared `g·χ²(h)` matching the first two moments of `Σ λⱼ χ²₁`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxApprox {
    pub g: f64,
    pub h: f64,
    pub eigenvalues: Vec<f64>,
}

impl BoxApprox {
    pub fn mean(&self) -> f64 {
        self.g * self.h
    }

    pub fn variance(&self) -> f64 {
        2.0 * self.g * self.g * self.h
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        ChiSquared::new(self.h)
            .map(|c| c.cdf(x / self.g))
            .unwrap_or(f64::NAN)
    }
}

pub fn box_gh(eigenvalues: &[f64]) -> Result<BoxApprox> {
    if let Some(l) = eigenvalues.iter().find(|l| !l.is_finite() || **l < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eigenvalue {l} is negative or not finite"
        )));
    }
    let s1 = compensated_sum(eigenvalues.iter().copied());
    let s2 = compensated_sum(eigenvalues.iter().map(|l| l * l));
    if s1 <= 0.0 {
        return Err(Error::DegenerateForm);
    }
    Ok(BoxApprox {
        g: s2 / s1,
        h: s1 * s1 / s2,
        eigenvalues: eigenvalues.to_vec(),
    })
}

/// Eigenvalues of `AΣ`, largest first, via the symmetric `Σ^{1/2} A Σ^{1/2}`.
pub fn term_eigenvalues(q: &QuadraticFormTerm, sigma: &DMatrix<f64>) -> Result<Vec<f64>> {
    matrix_eigenvalues(&q.matrix, sigma)
}

pub(crate) fn matrix_eigenvalues(a: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = a.nrows();
    if sigma.nrows() != n || sigma.ncols() != n || a.ncols() != n {
        return Err(Error::Dimension(format!(
            "form is {}x{}, covariance is {}x{}",
            a.nrows(),
            a.ncols(),
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let scale = sigma.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    if (sigma - sigma.transpose()).amax() > 1e-10 * scale {
        return Err(Error::InvalidArgument("covariance is not symmetric".into()));
    }
    let eig = SymmetricEigen::new(sigma.clone());
    let min = eig.eigenvalues.min();
    if min < -1e-10 * scale {
        return Err(Error::NotPsd(min));
    }
    let root = DVector::from_iterator(n, eig.eigenvalues.iter().map(|s| s.max(0.0).sqrt()));
    let half = &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose();
    let mut m = &half * a * &half;
    m = (&m + m.transpose()) * 0.5;
    let trace = m.trace().abs().max(1.0);
    let mut values: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    if let Some(neg) = values.iter().copied().find(|l| *l < -1e-10 * trace) {
        return Err(Error::NotPsd(neg));
    }
    for v in values.iter_mut() {
        *v = v.max(0.0);
    }
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}

/// Distributional summary of one decomposition term across bootstrap replicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermDiagnostics {
    pub source: String,
    /// Weighted eigenvalues `P(node)·λ` pooled over the nodes of the term.
    pub eigenvalues: Vec<f64>,
    pub box_approx: Option<BoxApprox>,
    pub bootstrap_mean: f64,
    pub bootstrap_variance: f64,
}

/// Diagnostics for every term of `reference`, with the covariance of each
/// node's centred means estimated as the second moment `E[ŶŶᵀ]` over the
/// replicate trees (which must share the reference shape). The residual term
/// is summarised by mean and variance only.
pub fn term_diagnostics(
    reference: &FactorTree,
    replicates: &[FactorTree],
) -> Result<Vec<TermDiagnostics>> {
    if replicates.len() < 2 {
        return Err(Error::InvalidArgument(
            "at least two replicate trees are needed".into(),
        ));
    }
    let shape = reference.level_counts();
    if replicates.iter().any(|t| t.level_counts() != shape) {
        return Err(Error::Dimension("replicate tree shapes differ".into()));
    }
    let base = quadratic_forms(reference);
    // Replicates only contribute centred means and term values; building
    // their matrices would cost O(levels²) memory per replicate.
    let rep_values: Vec<Vec<f64>> = replicates.iter().map(|t| t.decompose().values()).collect();
    let report = reference.decompose();
    let b = replicates.len() as f64;
    let mut out = Vec::with_capacity(shape.len() + 1);
    for (k, level) in base.forms.iter().enumerate() {
        let m = shape[k];
        let centred: Vec<(Vec<f64>, Vec<f64>)> = replicates
            .iter()
            .map(|t| (t.node_means(k), t.node_means(k + 1)))
            .collect();
        let mut pooled = Vec::new();
        for (i, form) in level.iter().enumerate() {
            let dim = form.centered.len();
            let mut second = DMatrix::<f64>::zeros(dim, dim);
            for (parents, children) in &centred {
                let y = DVector::from_iterator(
                    dim,
                    children[i * m..(i + 1) * m].iter().map(|c| c - parents[i]),
                );
                second.ger(1.0, &y, &y, 1.0);
            }
            second /= b;
            for l in term_eigenvalues(form, &second)? {
                pooled.push(form.outer_weight * l);
            }
        }
        let values: Vec<f64> = rep_values.iter().map(|v| v[k]).collect();
        out.push(TermDiagnostics {
            source: report.terms[k].source.clone(),
            box_approx: box_gh(&pooled).ok(),
            eigenvalues: pooled,
            bootstrap_mean: crate::numeric::mean(&values),
            bootstrap_variance: crate::numeric::sample_variance(&values),
        });
    }
    let residuals: Vec<f64> = rep_values.iter().map(|v| v[shape.len()]).collect();
    out.push(TermDiagnostics {
        source: report.terms[shape.len()].source.clone(),
        eigenvalues: Vec::new(),
        box_approx: None,
        bootstrap_mean: crate::numeric::mean(&residuals),
        bootstrap_variance: crate::numeric::sample_variance(&residuals),
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::ComponentPredictive;
    use crate::tree::TreeNode;

    fn g(mu: f64, var: f64) -> TreeNode {
        TreeNode::Leaf(ComponentPredictive::gaussian(mu, var).unwrap())
    }

    #[test]
    fn one_factor_form_equals_between_term() {
        let (xi1, xi2) = (0.3, 0.7);
        let tree = FactorTree::from_root_unnamed(TreeNode::Branch(vec![
            (xi1, g(1.0, 2.0)),
            (xi2, g(4.0, 1.0)),
        ]))
        .unwrap();
        let q = quadratic_forms(&tree);
        let form = &q.forms[0][0];
        assert_eq!(form.root_weights, vec![xi1.sqrt(), xi2.sqrt()]);
        let (_, between) = crate::mixture::two_term_decompose(&tree.flatten());
        assert!((form.value - between).abs() < 1e-14);
        assert!((form.matrix.trace() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn equal_means_give_zero_forms() {
        let tree = FactorTree::from_root_unnamed(TreeNode::Branch(vec![
            (
                0.5,
                TreeNode::Branch(vec![(0.2, g(2.0, 1.0)), (0.8, g(2.0, 3.0))]),
            ),
            (
                0.5,
                TreeNode::Branch(vec![(0.6, g(2.0, 1.0)), (0.4, g(2.0, 5.0))]),
            ),
        ]))
        .unwrap();
        let q = quadratic_forms(&tree);
        for level in &q.forms {
            for f in level {
                assert_eq!(f.value, 0.0);
            }
        }
    }

    #[test]
    fn box_equal_eigenvalues() {
        let b = box_gh(&[2.5; 4]).unwrap();
        assert!((b.g - 2.5).abs() < 1e-15);
        assert!((b.h - 4.0).abs() < 1e-15);
    }

    #[test]
    fn box_three_one() {
        let b = box_gh(&[3.0, 1.0]).unwrap();
        assert!((b.g - 2.5).abs() < 1e-15);
        assert!((b.h - 1.6).abs() < 1e-15);
        assert!((b.mean() - 4.0).abs() < 1e-14);
        assert!((b.variance() - 20.0).abs() < 1e-13);
    }

    #[test]
    fn box_degenerate() {
        assert!(matches!(box_gh(&[0.0, 0.0]), Err(Error::DegenerateForm)));
        assert!(box_gh(&[-1.0, 2.0]).is_err());
    }

    fn form_with(weights: &[f64]) -> QuadraticFormTerm {
        let means = vec![0.0; weights.len()];
        QuadraticFormTerm::new(0, 0, 1.0, weights, &means, 0.0)
    }

    #[test]
    fn identity_covariance_returns_weights() {
        let q = form_with(&[0.5, 0.3, 0.2]);
        let l = term_eigenvalues(&q, &DMatrix::identity(3, 3)).unwrap();
        assert!(
            (l[0] - 0.5).abs() < 1e-12 && (l[1] - 0.3).abs() < 1e-12 && (l[2] - 0.2).abs() < 1e-12
        );
        assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_covariance_scales_weights() {
        let q = form_with(&[0.25, 0.75]);
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 2.0]));
        let l = term_eigenvalues(&q, &sigma).unwrap();
        assert!((l[0] - 1.5).abs() < 1e-12 && (l[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_form_has_single_eigenvalue() {
        let w = DVector::from_vec(vec![0.6f64.sqrt(), 0.4f64.sqrt()]);
        let a = &w * w.transpose();
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let l = matrix_eigenvalues(&a, &sigma).unwrap();
        let expected = w.dot(&(&sigma * &w));
        assert!((l[0] - expected).abs() < 1e-12);
        assert!(l[1].abs() < 1e-12);
    }

    #[test]
    fn non_psd_covariance_is_rejected() {
        let q = form_with(&[0.5, 0.5]);
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            term_eigenvalues(&q, &sigma),
            Err(Error::NotPsd(_))
        ));
        let wrong = DMatrix::identity(3, 3);
        assert!(matches!(
            term_eigenvalues(&q, &wrong),
            Err(Error::Dimension(_))
        ));
    }
}
