use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    /// Asked for the gradient of something that is not a leaf of the tape that ran backward.
    #[error("missing gradient: node {0} is not a differentiable leaf of this tape")]
    MissingGradient(usize),

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric overflow in coupling layer {layer}")]
    NumericOverflow { layer: usize },

    #[error("flow training diverged at epoch {epoch}, batch {batch}")]
    TrainingDiverged { epoch: usize, batch: usize },

    #[error("training diverged in phase `{phase}` at round {round}, step {step}")]
    Diverged {
        phase: &'static str,
        round: usize,
        step: usize,
    },

    #[error("gradient ascent diverged at step {step}")]
    AscentDiverged { step: usize },

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failures while decoding an IDX container. Offsets are byte positions in the file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad magic {found} at offset {offset} (expected {expected})")]
    BadMagic {
        offset: usize,
        found: u32,
        expected: u32,
    },

    #[error("truncated payload at offset {offset}: needed {needed} bytes, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("count mismatch at offset {offset}: {images} images vs {labels} labels")]
    CountMismatch {
        offset: usize,
        images: usize,
        labels: usize,
    },
}
