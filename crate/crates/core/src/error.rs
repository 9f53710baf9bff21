use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown config key: {0}")]
    UnknownConfigKey(String),
    #[error("dataset format version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated or malformed record: {0}")]
    Truncated(String),
    #[error("checksum mismatch in {0}")]
    ChecksumMismatch(String),
    #[error("bad magic in {0}")]
    BadMagic(String),
    #[error("checkpoint mismatch on field {field}: checkpoint {found}, config {expected}")]
    CheckpointMismatch {
        field: String,
        found: String,
        expected: String,
    },
    #[error("non-finite loss at step {step}{detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("model error: {0}")]
    Model(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
