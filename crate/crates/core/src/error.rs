use thiserror::Error;

/// Errors produced by the decomposition, fitting and testing routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty mixture")]
    EmptyMixture,

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("invalid component: {0}")]
    InvalidComponent(String),

    #[error("non-rectangular factor tree: {0}")]
    NonRectangular(String),

    #[error("invalid factor tree: {0}")]
    InvalidTree(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid penalty: {0}")]
    InvalidPenalty(String),

    #[error("OLS underdetermined: {p} predictors with {n} observations")]
    OlsUnderdetermined { n: usize, p: usize },

    #[error("saturated support: {support} selected variables with {n} observations")]
    SaturatedSupport { support: usize, n: usize },

    #[error("IRLS diverged after {} iterations (deviance trace {trace:?})", trace.len())]
    IrlsDiverged { trace: Vec<f64> },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("degenerate form: all eigenvalues are zero")]
    DegenerateForm,

    #[error("matrix is not positive semidefinite (eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("probability {0} outside (0, 1)")]
    InvalidProbability(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("fit failed for model {model} in fold {fold}: {source}")]
    FoldFit {
        model: String,
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("replicate {index} failed after {attempts} attempts: {log}")]
    ReplicateFailed {
        index: usize,
        attempts: usize,
        log: String,
    },

    #[error("{0}")]
    Format(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for malformed input or configuration, as opposed to a failure
    /// while computing.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Format(_)
                | Error::Config(_)
                | Error::Json(_)
                | Error::Csv(_)
                | Error::InvalidDataset(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
