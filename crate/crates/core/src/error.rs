use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    UnparseableNumber {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}, column `{column}`: unknown level `{value}`")]
    UnknownLevel {
        row: usize,
        column: String,
        value: String,
    },

    #[error("csv error: {0}")]
    Csv(String),

    #[error("feature `{0}` is constant (stddev = 0)")]
    ConstantFeature(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("arity mismatch: expected {expected} values, got {got}")]
    Arity { expected: usize, got: usize },

    #[error("dataset has a single class; at least two are required")]
    SingleClass,

    #[error("training diverged: non-finite loss at epoch {0}")]
    NonFiniteLoss(usize),

    #[error("external model transport error: {0}")]
    Transport(String),

    #[error("external model protocol error: {0}")]
    Protocol(String),

    #[error("probability row {row} is not normalized (sum = {sum})")]
    NotNormalized { row: usize, sum: f64 },

    #[error("observation is already classified as target class {0}")]
    AlreadyTarget(usize),

    #[error("feature `{0}` is not numeric")]
    NotNumeric(String),

    #[error("unknown feature `{0}`")]
    UnknownFeature(String),

    #[error("band {band} has no pool points (pool size {pool_size})")]
    BandStarvation { band: String, pool_size: usize },

    #[error("singular design matrix for terms [{0}]")]
    SingularDesign(String),

    #[error("logistic fit did not converge within {0} iterations")]
    NonConvergent(usize),

    #[error("no feasible b-perturbations; % fidelity is undefined")]
    NoFeasibleRecords,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable name used in CLI and service error payloads.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Schema(_) => "schema",
            Error::MissingColumn(_) => "missing_column",
            Error::UnparseableNumber { .. } => "unparseable_number",
            Error::UnknownLevel { .. } => "unknown_level",
            Error::Csv(_) => "csv",
            Error::ConstantFeature(_) => "constant_feature",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Arity { .. } => "arity",
            Error::SingleClass => "single_class",
            Error::NonFiniteLoss(_) => "non_finite_loss",
            Error::Transport(_) => "transport",
            Error::Protocol(_) => "protocol",
            Error::NotNormalized { .. } => "not_normalized",
            Error::AlreadyTarget(_) => "already_target",
            Error::NotNumeric(_) => "not_numeric",
            Error::UnknownFeature(_) => "unknown_feature",
            Error::BandStarvation { .. } => "band_starvation",
            Error::SingularDesign(_) => "singular_design",
            Error::NonConvergent(_) => "non_convergent",
            Error::NoFeasibleRecords => "no_feasible_records",
        }
    }
}
