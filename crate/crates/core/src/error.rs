//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A column required by the covariate schema or outcome mapping is absent.
    #[error("missing required column: {0}")]
    MissingColumn(String),

    /// Two data rows share the same subject id.
    #[error("duplicate subject id: {0}")]
    DuplicateId(String),

    /// A cell could not be parsed under the schema's rules.
    #[error("row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    /// Schema validation failed (bad level sets, duplicate names, ...).
    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    /// A continuous design column has no variation in the subset.
    #[error("zero variance column: {0}")]
    ZeroVariance(String),

    /// Logistic likelihood is unbounded; coefficients diverged.
    #[error("perfect separation detected (coefficient norm diverged)")]
    Separation,

    /// Weighted normal equations (or a covariance matrix) are singular.
    #[error("singular system: {0}")]
    Singular(String),

    /// A matching structure cannot cover the cohort.
    #[error("infeasible structure: {0}")]
    Infeasible(String),

    /// A group needed by an operation is empty.
    #[error("empty group: {0}")]
    EmptyGroup(String),

    /// Degenerate input for a statistical operation.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Exposure tree failed validation.
    #[error("invalid exposure tree: {0}")]
    InvalidTree(String),

    /// A name referenced a node that does not exist in the tree.
    #[error("unknown node: {0}")]
    UnknownNode(String),

    /// A Monte Carlo experiment was requested with zero replications.
    #[error("empty experiment: replications must be positive")]
    EmptyExperiment,

    /// An outcome value required by a test is missing for a matched subject.
    #[error("missing outcome for subject {0}")]
    MissingOutcome(String),

    /// Invalid generator or run configuration.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Internal invariant violated; indicates a bug.
    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
