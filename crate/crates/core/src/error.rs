use std::path::PathBuf;

/// Errors raised anywhere in the editing toolkit.
///
/// The variants fall into the four classes the CLI maps onto exit codes:
/// validation/configuration problems, numerical failures, unavailable models
/// and plain I/O.
#[derive(Debug, thiserror::Error)]
pub enum PicError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("step index {index} out of range for a {num_steps}-step schedule ({context})")]
    StepIndex {
        index: usize,
        num_steps: usize,
        context: &'static str,
    },

    #[error("singular schedule: alpha_bar = {alpha_bar} at step {step}")]
    SingularSchedule { step: usize, alpha_bar: f64 },

    #[error("numerical failure at step {step} ({branch}): {detail}")]
    Numerical {
        step: usize,
        branch: String,
        detail: String,
    },

    #[error("unsupported edit: {0}")]
    UnsupportedEdit(String),

    #[error("task mismatch: {0}")]
    TaskMismatch(String),

    #[error("model unavailable: {0}")]
    ModelUnavailable(String),

    #[error("operation not supported by this adapter: {0}")]
    Unsupported(String),

    #[error("cache fingerprint mismatch at {path}: existing {existing}, requested {requested}")]
    FingerprintMismatch {
        path: PathBuf,
        existing: String,
        requested: String,
    },

    #[error("corrupt trajectory cache at {path}: {detail}")]
    CorruptCache { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("image error: {0}")]
    Image(String),
}

/// Coarse error class, used for CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Numerical,
    ModelUnavailable,
    Io,
}

impl PicError {
    pub fn class(&self) -> ErrorClass {
        match self {
            PicError::Numerical { .. } | PicError::SingularSchedule { .. } => ErrorClass::Numerical,
            PicError::ModelUnavailable(_) => ErrorClass::ModelUnavailable,
            PicError::Io { .. } | PicError::Image(_) => ErrorClass::Io,
            _ => ErrorClass::Validation,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PicError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numerical(
        step: usize,
        branch: impl Into<String>,
        detail: impl Into<String>,
    ) -> Self {
        PicError::Numerical {
            step,
            branch: branch.into(),
            detail: detail.into(),
        }
    }
}

impl From<serde_json::Error> for PicError {
    fn from(e: serde_json::Error) -> Self {
        PicError::Serde(e.to_string())
    }
}

impl From<image::ImageError> for PicError {
    fn from(e: image::ImageError) -> Self {
        PicError::Image(e.to_string())
    }
}

pub type Result<T, E = PicError> = std::result::Result<T, E>;
