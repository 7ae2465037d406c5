use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("schema: {0}")]
    Schema(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("duplicate row for unit {unit} at time {time}")]
    DuplicateKey { unit: String, time: f64 },

    #[error("unit {unit} is missing time values {missing:?}")]
    IncompletePanel { unit: String, missing: Vec<f64> },

    #[error("non-numeric value {value:?} in column {column} (data row {row})")]
    NonNumeric {
        column: String,
        row: usize,
        value: String,
    },

    #[error("column {column} is declared binary but holds {value} (data row {row})")]
    KindViolation {
        column: String,
        row: usize,
        value: f64,
    },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("design matrix is rank deficient: {0}")]
    RankDeficient(String),

    #[error("invalid response for {family} family: {message}")]
    InvalidResponse {
        family: &'static str,
        message: String,
    },

    #[error("IRLS did not converge after {iterations} iterations")]
    NotConverged { iterations: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("balancing constraints are infeasible; worst column {column} (violation {violation:e})")]
    Infeasible { column: String, violation: f64 },

    #[error(
        "entropy solver stopped after {iterations} iterations; worst column {column} (violation {violation:e})"
    )]
    MaxIterations {
        iterations: usize,
        column: String,
        violation: f64,
    },

    #[error("empty constraint set")]
    EmptyConstraints,

    #[error("confounder model for {variable} at period {period} failed: {source}")]
    ConfounderModel {
        period: usize,
        variable: String,
        #[source]
        source: Box<Error>,
    },

    #[error("positivity violation: unit {unit}, period {period}, density {density:e}")]
    Positivity {
        unit: String,
        period: usize,
        density: f64,
    },

    #[error("missing truth value for unit {unit}, period {period}")]
    MissingTruth { unit: String, period: usize },

    #[error("formula syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("unknown column `{name}` at offset {offset}")]
    UnknownColumn { name: String, offset: usize },

    #[error("duplicate term `{term}` at offset {offset}")]
    DuplicateTerm { term: String, offset: usize },

    #[error("unit id {0} in weights is absent from the data")]
    Join(String),

    #[error("every estimator failed on every replication")]
    AllFailed,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
