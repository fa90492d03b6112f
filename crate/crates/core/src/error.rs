use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the stacking pipeline.
#[derive(Debug, Error)]
pub enum StackError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("coefficient vector has zero norm; signal scale is undefined")]
    DegenerateSignal,

    #[error("linear system for candidate '{label}' is not positive definite")]
    SingularSystem { label: String },

    #[error("leverage of row {row} is within 1e-12 of one for candidate '{label}'")]
    IllConditionedLeverage { row: usize, label: String },

    #[error("{0} requires a closed-form linear smoother (normal prior on a linear candidate)")]
    NotALinearSmoother(String),

    #[error("candidate family mismatch: {0}")]
    FamilyMismatch(String),

    #[error(
        "fold assignment left a single-class training set after {attempts} draws \
         (seed {seed}); try another seed or fewer folds"
    )]
    DegenerateFold { attempts: usize, seed: u64 },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),

    #[error("n = {n} exceeds the explicit-matrix cap of {cap}")]
    TooLarge { n: usize, cap: usize },

    #[error("CSV parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("cell (n = {n}, r2 = {r2}) failed: {failed} of {replications} replications errored; first error: {first}")]
    CellFailed {
        n: usize,
        r2: f64,
        failed: usize,
        replications: usize,
        first: String,
    },

    #[error("candidate '{label}': {source}")]
    Candidate {
        label: String,
        #[source]
        source: Box<StackError>,
    },
}

impl StackError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StackError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn for_candidate(self, label: &str) -> Self {
        match self {
            // already names the candidate
            e @ (StackError::SingularSystem { .. }
            | StackError::IllConditionedLeverage { .. }
            | StackError::Candidate { .. }) => e,
            other => StackError::Candidate {
                label: label.to_string(),
                source: Box::new(other),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, StackError>;
