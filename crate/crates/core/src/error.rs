use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("invalid value for `{key}`: {msg}")]
    ConfigInvalid { key: String, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite input at coordinate {index}")]
    NonFinite { index: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sequence of {len} positions exceeds the configured maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("input too short: {len} samples, need at least {min}")]
    TooShort { len: usize, min: usize },

    #[error("chunk of {len} samples is not a multiple of {multiple}")]
    ChunkLength { len: usize, multiple: usize },

    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),

    #[error("non-finite loss at step {step}; per-module grad norms: {grad_norms}")]
    NonFiniteLoss { step: u64, grad_norms: String },

    #[error("non-finite latent generated at slot {slot}")]
    NonFiniteLatent { slot: usize },

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("missing field `{field}` in record {record}")]
    MissingField { record: String, field: String },

    #[error("not found: {0}")]
    NotFound(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category, used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ConfigParse { .. } => "config_parse",
            Error::ConfigInvalid { .. } => "config_invalid",
            Error::Config(_) => "config",
            Error::NonFinite { .. } => "non_finite_input",
            Error::Shape(_) => "shape",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::TooShort { .. } => "too_short",
            Error::ChunkLength { .. } => "chunk_length",
            Error::Mismatch(_) => "mismatch",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::NonFiniteLatent { .. } => "non_finite_latent",
            Error::Format { .. } => "format",
            Error::MissingField { .. } => "missing_field",
            Error::NotFound(_) => "not_found",
            Error::Io(_) => "io",
            Error::Wav(_) => "wav",
            Error::Json(_) => "json",
        }
    }
}
