use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: JSON parse error at line {line}, column {column}: {message}")]
    Json {
        context: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{context}: row {row}: {message}")]
    Schema {
        context: String,
        row: usize,
        message: String,
    },

    #[error("invalid {what}: {message}")]
    Validation { what: String, message: String },

    #[error("unknown model '{name}' (available: {})", available.join(", "))]
    UnknownModel { name: String, available: Vec<String> },

    #[error("unknown config id {0}")]
    UnknownConfig(usize),

    #[error("no valid tile configuration for this hardware model and geometry")]
    EmptyPool,

    #[error("dispatch table is empty")]
    EmptyTable,

    #[error("histogram has no routed tokens")]
    NoRoutedTokens,

    #[error("histogram has {got} experts, model expects {expected}")]
    HistogramLength { expected: usize, got: usize },

    #[error(
        "balancedness {target} is not reachable with {experts} experts and {assignments} assignments \
         (closest calibrated mean {closest:.3})"
    )]
    UnreachableBeta {
        target: f64,
        experts: usize,
        assignments: u64,
        closest: f64,
    },

    #[error("cannot fit config {config_id}: {message}")]
    Fit { config_id: usize, message: String },

    #[error("missing artifact {0}; run the upstream command first")]
    MissingArtifact(PathBuf),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, err: &serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }

    pub(crate) fn validation(what: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            what: what.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 2 for data/validation problems.
    pub fn exit_code(&self) -> i32 {
        2
    }
}
