use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("class {class} has no samples")]
    EmptyClass { class: usize },

    #[error("no genuine pairs available")]
    NoGenuinePairs,

    #[error("head layer {layer} has a nonlinear activation; strict propagation needs affine layers")]
    UnsupportedHead { layer: usize },

    #[error("relu pre-activation within {margin:e} of zero; resample the probe point")]
    NearKink { margin: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("cannot stratify: class {class} has {count} samples, fewer than {folds} folds")]
    Stratification {
        class: usize,
        count: usize,
        folds: usize,
    },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("missing prerequisite {}", .0.display())]
    Dependency(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad user input (configuration, schema, usage)
    /// rather than a runtime or numeric failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Parse { .. } | Error::Schema(_) | Error::Range(_)
        )
    }
}
