//! Crate-wide error type.
//!
//! Every variant maps to one error category; the CLI turns categories into
//! exit codes (see [`Error::exit_code`]).

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("sequence length {len} exceeds max_seq {max}")]
    Length { len: usize, max: usize },

    #[error("vocab error: {0}")]
    Vocab(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("shape error in {tensor}: expected {expected:?}, found {found:?}")]
    Shape {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("missing stage input: {}", .0.display())]
    Dependency(PathBuf),

    #[error("refusing to overwrite {} (pass --force)", .0.display())]
    Exists(PathBuf),

    #[error("substitution error: {0}")]
    Substitution(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-parsable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) | Error::Shape { .. } => "dimension",
            Error::Degenerate(_) => "degenerate",
            Error::Usage(_) => "usage",
            Error::Domain(_) => "domain",
            Error::Numeric(_) => "numeric",
            Error::Length { .. } => "length",
            Error::Vocab(_) => "vocab",
            Error::Divergence { .. } => "divergence",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::Validation(_) => "validation",
            Error::Dependency(_) => "dependency",
            Error::Exists(_) => "exists",
            Error::Substitution(_) => "substitution",
            Error::Io(_) => "io",
            Error::Json(_) | Error::Csv(_) => "format",
        }
    }

    /// Process exit code: 2 validation, 3 dependency, 4 numeric divergence, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dependency(_) => 3,
            Error::Divergence { .. } | Error::Numeric(_) => 4,
            Error::Io(_) | Error::Exists(_) => 5,
            _ => 2,
        }
    }
}
