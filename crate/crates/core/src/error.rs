use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("capacity exceeded: {k} items do not fit into capacity {n}")]
    Capacity { k: usize, n: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("palette generation failed: {0}")]
    Generation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at iteration {iteration}: {breakdown}")]
    Diverged { iteration: usize, breakdown: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used by the command-line error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Shape(_) => "shape",
            Error::Parameter(_) => "parameter",
            Error::Capacity { .. } => "capacity",
            Error::NonFinite { .. } => "non_finite",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Generation(_) => "generation",
            Error::Format(_) => "format",
            Error::Checkpoint(_) => "checkpoint",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }
}
