//! Predictive analysis of variance ("P-ANOVA") for model-averaged predictors.
//!
//! The predictive variance of a Bayes model average or stacking mixture is
//! split into one between-level term per modelling factor plus the expected
//! within-model variance. Each term's share of the total can then be tested
//! with a two-layer bootstrap, and the mixtures give prediction intervals
//! whose coverage drives model-list selection.

pub mod average;
pub mod decompose;
pub mod error;
pub mod experiments;
pub mod fit;
pub mod intervals;
pub mod mixture;
pub mod numeric;
pub mod report;
pub mod tree;
pub mod vartest;

pub use error::{Error, Result};
pub use mixture::{
    mixture_mean, mixture_variance, two_term_decompose, ComponentPredictive, Family,
    PredictiveMixture,
};
pub use tree::{decompose_k, DecompositionReport, FactorTree, TreeNode, VarianceTerm};
