use thiserror::Error;

/// Crate-wide error type. Variants are grouped by the subsystem that raises
/// them; the CLI maps each group onto a stable process exit code.
#[derive(Debug, Error)]
pub enum Error {
    // Tensor and kernel shape violations.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("shapes are not broadcastable: {0}")]
    NotBroadcastable(String),
    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("window exceeds input: {0}")]
    WindowExceedsInput(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    // Weight-store parsing and validation. The five corruption classes
    // (magic, version, entry shape, truncation, non-finite payload) stay
    // distinct so callers can tell them apart.
    #[error("weight store: bad magic bytes")]
    BadMagic,
    #[error("weight store: unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("weight entry '{name}': expected shape {expected:?}, found {found:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("weight entry '{0}': truncated payload")]
    TruncatedPayload(String),
    #[error("weight entry '{name}': non-finite value at flat index {index}")]
    WeightNonFinite { name: String, index: usize },
    #[error("weight store: missing entry '{0}'")]
    MissingEntry(String),
    #[error("weight store: unexpected entry '{0}'")]
    UnexpectedEntry(String),
    #[error("weight store: {0}")]
    WeightStore(String),

    // Image decoding and file handling.
    #[error("image {path}: {reason}")]
    Image { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
