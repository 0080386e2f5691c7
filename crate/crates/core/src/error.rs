use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range for {count} primitives")]
    OutOfBounds { index: usize, count: usize },

    #[error("primitive {index} has a zero-norm rotation quaternion")]
    DegenerateQuaternion { index: usize },

    #[error("non-finite value in field `{field}` of primitive {index}")]
    NonFinite { field: &'static str, index: usize },

    #[error("shape mismatch in `{field}`: expected {expected} values, found {found}")]
    Shape {
        field: String,
        expected: usize,
        found: usize,
    },

    #[error("image size mismatch: {a_width}x{a_height} vs {b_width}x{b_height}")]
    ImageSize {
        a_width: usize,
        a_height: usize,
        b_width: usize,
        b_height: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("backward pass inputs do not match the forward render ({0})")]
    StaleRender(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("unknown camera id `{0}`")]
    UnknownCamera(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("no initialization points: {0}")]
    EmptyInit(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("iteration {iteration}: {source}")]
    Training {
        iteration: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::NonFinite { .. }
            | Error::DegenerateQuaternion { .. }
            | Error::DegenerateGeometry(_) => ErrorKind::Numeric,
            Error::Training { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }
}
