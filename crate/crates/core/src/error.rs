use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
///
/// `Domain` and `Validation` map to CLI exit code 2, `Budget` to exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error(
        "enumeration budget exceeded: {what} needs up to {bound:.4e} items, budget is {budget}"
    )]
    Budget {
        what: String,
        bound: f64,
        budget: u64,
    },

    #[error("EIT fit failed ({kind}); tail table = {tail:?}")]
    Fit { kind: FitFailure, tail: Vec<f64> },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Why an exponential-intersection-tail fit could not be produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitFailure {
    /// Every sampled pair was disjoint; the table is all mass at zero.
    NoIntersections,
    /// The tail does not decay (fitted rate ≥ 1), e.g. S = T always.
    NoDecay,
    /// Fewer than two levels with positive empirical tail.
    InsufficientLevels,
}

impl std::fmt::Display for FitFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FitFailure::NoIntersections => "degenerate table: all mass at zero intersection",
            FitFailure::NoDecay => "tail does not decay",
            FitFailure::InsufficientLevels => "fewer than two positive tail levels",
        };
        f.write_str(s)
    }
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Domain(_) | Error::Validation(_) | Error::Parse(_) => 2,
            Error::Budget { .. } => 3,
            Error::Fit { .. } => 4,
            Error::Io { .. } | Error::Json { .. } => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
