use std::path::PathBuf;

pub type Result<X> = std::result::Result<X, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("log of non-positive value {0}")]
    LogNonPositive(f64),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("tape is no longer live (already consumed by backward or cleared)")]
    DeadTape,
    #[error("unsupported kernel size {0}x{1}")]
    UnsupportedKernel(usize, usize),
    #[error("empty reduction")]
    EmptyReduction,
    #[error("slice {start}..{end} out of range for extent {extent}")]
    OutOfRange {
        start: usize,
        end: usize,
        extent: usize,
    },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("batch norm: {0}")]
    BatchNorm(String),
    #[error("config: {0}")]
    Config(String),
    #[error("container: {0}")]
    Container(String),
    #[error("truncated container")]
    Truncated,
    #[error("unknown parameter '{0}'")]
    MissingParam(String),
    #[error("training diverged at epoch {epoch}: {reason} (last good checkpoint: {last_good:?})")]
    Diverged {
        epoch: usize,
        reason: String,
        last_good: Option<PathBuf>,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
