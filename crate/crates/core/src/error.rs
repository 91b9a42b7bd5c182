use thiserror::Error;

/// Error type shared across the toolkit. The CLI maps these onto process
/// exit codes, so the distinction between variants is part of the contract:
/// configuration problems, data/format problems, capacity exhaustion and
/// internal invariant violations must stay separable.
#[derive(Debug, Error)]
pub enum TfmError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// Malformed binary input (snapshot, model file, IDX stream). `offset`
    /// is the byte position at which decoding failed.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("capacity exhausted: {0}")]
    Capacity(String),

    #[error("unknown task {task}: {context}")]
    TaskLookup { task: u32, context: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    /// An internal precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TfmError>;

impl TfmError {
    /// Process exit code for the CLI: 0 is success, 2 config, 3 data/format,
    /// 4 capacity, 5 everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            TfmError::Config(_) => 2,
            TfmError::Data(_) | TfmError::Format { .. } | TfmError::Io(_) => 3,
            TfmError::Capacity(_) => 4,
            _ => 5,
        }
    }
}
