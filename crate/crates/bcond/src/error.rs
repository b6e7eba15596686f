use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {source}")]
    ImageDecode {
        path: PathBuf,
        #[source]
        source: Box<image::ImageError>,
    },

    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{context}: expected {expected} elements, got {got}")]
    LengthMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("image is {width}x{height}; {op} needs at least {min}x{min}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        min: usize,
        op: &'static str,
    },

    #[error("patch {id} at ({x},{y}) side {side} exceeds image bounds {width}x{height}")]
    PatchOutOfBounds {
        id: String,
        x: usize,
        y: usize,
        side: usize,
        width: usize,
        height: usize,
    },

    #[error("patch side {side} is below the minimum of {min} for this operation")]
    PatchTooSmall { side: usize, min: usize },

    #[error("patch record has no pixel data but the operation requires pixels")]
    MissingPixels,

    #[error("training data is missing class {0}")]
    MissingClass(String),

    #[error("training loss became non-finite at epoch {epoch}, batch {batch}; lower the learning rate")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("model file {path}: {reason}")]
    ModelFormat { path: PathBuf, reason: String },

    #[error("model file {path}: unsupported format version {found}, this build reads version {supported}")]
    ModelVersion {
        path: PathBuf,
        found: u16,
        supported: u16,
    },

    #[error("design matrix is rank deficient: column '{column}' is linearly dependent on the others")]
    SingularDesign { column: String },

    #[error("csv {path}: {reason}")]
    Csv { path: PathBuf, reason: String },

    #[error("{0}")]
    Stats(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn manifest(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Manifest {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn model_format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::ModelFormat {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Csv {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
