use std::path::PathBuf;

use angiophase_tensor::EngineError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("signal of {len} samples is shorter than the {taps}-tap filter")]
    SignalTooShort { len: usize, taps: usize },

    #[error("found {found} R peaks, need at least 2")]
    InsufficientBeats { found: usize },

    #[error("no T peak candidate in the beat starting at sample {r}")]
    TPeakNotFound { r: usize },

    #[error("frame interval does not overlap the valid ECG range")]
    NoOverlap,

    #[error("frame rate {fps} fps is below the 10 fps minimum")]
    UnsupportedFrameRate { fps: f64 },

    #[error("sequence has {frames} frames, need at least {needed}")]
    SequenceTooShort { frames: usize, needed: usize },

    #[error("configuration: {0}")]
    Config(String),

    #[error("value outside the domain: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training set is empty")]
    EmptyDataset,

    #[error("no eligible frames to evaluate")]
    EmptyEvaluation,

    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("collimation removed {rows}/{height} rows and {cols}/{width} columns")]
    Collimation {
        rows: usize,
        cols: usize,
        height: usize,
        width: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed for `{bundle}`: {source}")]
    Stage {
        stage: &'static str,
        bundle: String,
        source: Box<Error>,
    },

    #[error(transparent)]
    Engine(#[from] EngineError),
}

impl Error {
    pub fn format(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str, bundle: impl Into<String>) -> Self {
        Self::Stage {
            stage,
            bundle: bundle.into(),
            source: Box::new(self),
        }
    }

    /// Stable machine-readable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::SignalTooShort { .. } => "SignalTooShort",
            Error::InsufficientBeats { .. } => "InsufficientBeats",
            Error::TPeakNotFound { .. } => "TPeakNotFound",
            Error::NoOverlap => "NoOverlap",
            Error::UnsupportedFrameRate { .. } => "UnsupportedFrameRate",
            Error::SequenceTooShort { .. } => "SequenceTooShort",
            Error::Config(_) => "ConfigError",
            Error::Domain(_) => "DomainError",
            Error::Shape(_) => "ShapeError",
            Error::EmptyDataset => "EmptyDataset",
            Error::EmptyEvaluation => "EmptyEvaluation",
            Error::Format { .. } => "FormatError",
            Error::Collimation { .. } => "CollimationError",
            Error::Io { .. } => "IoError",
            Error::Stage { source, .. } => source.category(),
            Error::Engine(e) => match e {
                EngineError::Shape { .. } => "ShapeError",
                EngineError::Numeric { .. } => "NumericError",
                EngineError::State(_) => "StateError",
                EngineError::Format(_) => "FormatError",
                EngineError::Io(_) => "IoError",
                _ => "EngineError",
            },
        }
    }
}
