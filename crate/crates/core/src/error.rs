use std::path::PathBuf;

/// Errors raised by the engine. Every fallible operation in the crate returns
/// this type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("cannot pool an empty chunk")]
    EmptyChunk,

    #[error("attention over an empty selection")]
    EmptySelection,

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("finite-difference oracle produced a non-finite value at coordinate {coordinate}")]
    OracleFailure { coordinate: usize },

    #[error("cannot compress a past segment of {past} entries: observation window is empty")]
    CompressionUndefined { past: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("index {index} out of range 0..={max}")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("all token weights are zero")]
    DegenerateWeights,

    #[error("scaling fit needs at least 3 points with distinct lengths, got {0}")]
    InsufficientData(usize),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Load failures for the binary checkpoint format. Each corruption class maps
/// to its own variant so callers can tell them apart.
#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("unsupported value width {0} bytes")]
    BadValueWidth(u8),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("unexpected parameter `{0}`")]
    UnexpectedParameter(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("malformed checkpoint metadata: {0}")]
    Metadata(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, got: impl ToString) -> Error {
    Error::Shape {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
