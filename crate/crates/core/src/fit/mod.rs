//! Native candidate predictors: OLS and penalized linear regression fitted by
//! coordinate descent, and binomial GLMs under logit, probit and cloglog
//! links fitted by IRLS.

mod cv;
mod data;
mod glm;
mod penalized;

pub use cv::{
    assign_folds, select_lambda_cv, select_lambda_cv_with, LambdaRule, LambdaSelection,
    LAMBDA_GRID_LEN,
};
pub use data::Dataset;
pub use glm::{
    fit_glm_binomial, fit_glm_binomial_penalized, fit_glm_with_fallback, model_grid,
    table_order_subsets, GlmFit, GlmSpec, Link, FALLBACK_RIDGE, MAX_IRLS_ITER,
};
pub use penalized::{
    adaptive_weights_from_ridge, bootstrap_pred_variance, bootstrap_pred_variance_with,
    estimate_sigma2, fit_penalized, kkt_residual, penalized_objective, soft_threshold, FittedModel,
    PenaltyKind, PenaltySpec,
};
