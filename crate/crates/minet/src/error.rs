use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: channel mismatch, expected {expected} input channels, got {got}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: output would be empty for input {h}x{w}")]
    EmptyOutput { op: &'static str, h: usize, w: usize },

    #[error("backward requires a scalar loss, got shape {shape}")]
    NonScalarLoss { shape: String },

    #[error("graph already consumed by a previous backward call")]
    GraphConsumed,

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("non-finite value in implicit iteration at recursion {kappa}")]
    NonFiniteIteration { kappa: usize },

    #[error("NaN gradient for parameter '{param}'")]
    NanGradient { param: String },

    #[error("training loss became non-finite at iteration {iteration}")]
    DivergedLoss { iteration: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown config keys: {0}")]
    UnknownConfigKeys(String),

    #[error("implicit scheme pole: 1 - eta*lambda = 0")]
    ImplicitPole,

    #[error("ppm format error: {0}")]
    PpmFormat(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint has bad magic (not a model weight file)")]
    BadMagic,

    #[error("manifest parse error at line {line}: {msg}")]
    ManifestParse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
