use thiserror::Error;

use crate::vocab::TokenId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("byte {byte} at position {position} is outside the 7-bit text range")]
    NonAsciiByte { position: usize, byte: u8 },

    #[error("token {token} is outside the {expected} range")]
    OutOfRangeToken { token: TokenId, expected: &'static str },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("need {needed} distinct patches for the codebook, found {distinct}")]
    TooFewPatches { distinct: usize, needed: usize },

    #[error("token {token} at position {position} violates the {segment} segment range")]
    RangeViolation { position: usize, token: TokenId, segment: &'static str },

    #[error("sequence has no maskable positions")]
    NoMaskablePositions,

    #[error("mask token left at position {position}")]
    ResidualMask { position: usize },

    #[error("sequence length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {token} is not below vocabulary size {vocab}")]
    InvalidTokenId { token: TokenId, vocab: usize },

    #[error("loss is not finite")]
    NonFiniteLoss,

    #[error("gradient of {tensor} is not finite")]
    NonFiniteGradient { tensor: String },

    #[error("episode of length {len} is too short for chunk size {chunk}")]
    EpisodeTooShort { len: usize, chunk: usize },

    #[error("expert failed {failures} of {attempts} attempts")]
    ExpertFailureRate { failures: usize, attempts: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::NonFiniteLoss | Error::NonFiniteGradient { .. } => 3,
            Error::Checkpoint(_) | Error::CheckpointVersion { .. } => 4,
            _ => 2,
        }
    }
}
