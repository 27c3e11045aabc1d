use std::path::PathBuf;

use thiserror::Error;

use crate::boxgeom::BBox;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box {0:?}: width and height must be finite and positive")]
    InvalidBox(BBox),
    #[error("IoU {iou} is outside the configured range [{lo}, 1]")]
    IouOutOfRange { iou: f64, lo: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("box {0:?} does not overlap any ground truth")]
    Unmatched(BBox),
    #[error("IoU predictor training sample {index} has IoU {iou} < 0.5")]
    NegativeTrainingSample { index: usize, iou: f64 },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
