use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("parameter mismatch: missing {missing:?}, extra {extra:?}")]
    ParameterMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("non-finite loss at epoch {epoch}; first non-finite gradient in `{param}`")]
    NonFinite { epoch: usize, param: String },

    #[error("image error in {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Short machine-readable tag for the error family.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Format(_) => "format",
            Error::ParameterMismatch { .. } => "parameter_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::Image { .. } => "image",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
