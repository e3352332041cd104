use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {}: {reason}", path.display())]
    Image { path: PathBuf, reason: String },

    #[error("degenerate hull: all {0} points are collinear")]
    DegenerateHull(usize),

    #[error("corrosion ratio band [{lo}, {hi}] unreachable for {form} after {attempts} attempts")]
    SamplingFailure {
        form: String,
        lo: f64,
        hi: f64,
        attempts: usize,
    },

    #[error("cannot render character {0:?}")]
    Render(char),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
