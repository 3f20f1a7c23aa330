use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad category of a failure, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
    Shape,
    Io,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("{op}: non-finite output")]
    NonFinite { op: &'static str },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("adamw: non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} ({cause})")]
    NonFiniteLoss { epoch: usize, batch: usize, cause: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{}: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})", path.display())]
    Checksum {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("{}: extents {found:?} do not match expected {expected:?}", path.display())]
    Extent {
        path: PathBuf,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("{}: file not found", .0.display())]
    MissingFile(PathBuf),

    #[error("{}: malformed data: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Shape { .. } => ErrorKind::Shape,
            Error::Invalid { .. } => ErrorKind::Shape,
            Error::NonFinite { .. }
            | Error::NonScalarLoss(_)
            | Error::NonFiniteGradient(_)
            | Error::NonFiniteLoss { .. } => ErrorKind::Numerical,
            Error::Config(_) | Error::Checkpoint(_) => ErrorKind::Config,
            Error::Checksum { .. }
            | Error::Extent { .. }
            | Error::MissingFile(_)
            | Error::Format { .. }
            | Error::Dataset(_) => ErrorKind::Data,
            Error::Io(_) => ErrorKind::Io,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }
}
