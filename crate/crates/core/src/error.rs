use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("target {target} out of range for {classes} classes at position {position}")]
    TargetOutOfRange {
        target: usize,
        classes: usize,
        position: usize,
    },

    #[error("parameter `{0}` is already registered")]
    DuplicateParameter(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("unknown token `{token}` on line {line}")]
    UnknownToken { token: String, line: usize },

    #[error("bias spans overlap: [{a_start}, {a_end}) and [{b_start}, {b_end})")]
    OverlappingSpans {
        a_start: usize,
        a_end: usize,
        b_start: usize,
        b_end: usize,
    },

    #[error("invalid bias span: {0}")]
    InvalidSpan(String),

    #[error("bias phrase of length {len} exceeds the maximum of {max}")]
    PhraseTooLong { len: usize, max: usize },

    #[error("empty bias phrase")]
    EmptyPhrase,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step} (non-finite loss)")]
    Diverged { step: usize },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
