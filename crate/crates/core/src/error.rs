use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("missing frame {0:06}")]
    MissingFrame(usize),
    #[error("invalid value for `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("homography fit failed: {0}")]
    Fit(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(field: &str, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.to_string(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad user input rather than a failing run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. } | Error::Config(_) | Error::MissingFrame(_)
        )
    }
}

pub(crate) fn ensure_same_dims(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "{what}: dimension mismatch {}x{} vs {}x{}",
            a.1, a.0, b.1, b.0
        )));
    }
    Ok(())
}
