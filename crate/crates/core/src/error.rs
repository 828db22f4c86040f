use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {id} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        id: usize,
        size: usize,
    },

    #[error("NaN encountered in input to {0}")]
    NaN(&'static str),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("non-finite list utility w = {0}")]
    NonFiniteReward(f64),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: invariant violated on field `{field}`: {msg}")]
    Invariant {
        line: usize,
        field: &'static str,
        msg: String,
    },

    #[error("schema: {0}")]
    Schema(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("candidate pool too small: no replacement available outside the list")]
    PoolTooSmall,

    #[error("permutation space A({n},{m}) = {count} exceeds the enumeration cap {cap}; sampling mode is not supported")]
    CapExceeded {
        n: usize,
        m: usize,
        count: u128,
        cap: usize,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("missing {what}: {path}")]
    MissingInput { what: &'static str, path: PathBuf },

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}

impl Error {
    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingInput { .. } => 2,
            Error::Config { .. } => 3,
            _ => 1,
        }
    }

    /// Short machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Index { .. } => "index",
            Error::NaN(_) => "nan",
            Error::NonFiniteGrad(_) => "non_finite_grad",
            Error::Divergence { .. } => "divergence",
            Error::NonFiniteReward(_) => "non_finite_reward",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Invariant { .. } => "invariant",
            Error::Schema(_) => "schema",
            Error::Checkpoint(_) => "checkpoint",
            Error::MissingParam(_) => "missing_param",
            Error::PoolTooSmall => "pool_too_small",
            Error::CapExceeded { .. } => "cap_exceeded",
            Error::Invalid(_) => "invalid",
            Error::MissingInput { .. } => "missing_input",
            Error::Config { .. } => "config",
        }
    }
}
