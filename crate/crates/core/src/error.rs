use thiserror::Error;

/// Errors raised anywhere in the lab core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown parameter segment `{0}`")]
    UnknownSegment(String),

    #[error("duplicate parameter segment `{0}`")]
    DuplicateSegment(String),

    #[error("stale tape: parameter segment `{0}` changed after the forward pass")]
    StaleTape(String),

    #[error("backward needs a scalar output, got a {rows}x{cols} node")]
    NonScalarOutput { rows: usize, cols: usize },

    #[error("token id {token} out of range for a vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("sequence of length {len} exceeds the context window of {window}")]
    ContextOverflow { len: usize, window: usize },

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed prompt: {0}")]
    MalformedPrompt(String),

    #[error("enumeration guard exceeded: |V|^L = {required:e} is above the bound {bound:e}")]
    EnumerationGuard { required: f64, bound: f64 },

    #[error("snapshot version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u64, found: u64 },

    #[error("advantages are not centered (sum = {0:e})")]
    NotCentered(f64),

    #[error("non-finite loss or update at step {step}; step aborted")]
    NonFiniteLoss { step: u64 },

    #[error("snapshot format: {0}")]
    SnapshotFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
