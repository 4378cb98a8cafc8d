use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ctc alignment infeasible: target needs at least {min_frames} frames, input has {frames}")]
    CtcInfeasible { frames: usize, min_frames: usize },

    #[error("ctc path oracle only enumerates up to {max} frames, got {got}")]
    OracleTooLong { max: usize, got: usize },

    #[error("label {label} outside vocabulary of size {vocab}")]
    LabelOutOfRange { label: usize, vocab: usize },

    #[error("reference transcript is empty")]
    EmptyReference,

    #[error("mutual information estimate needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),

    #[error("cannot fit {requested} accent directions into {dims} feature dimensions")]
    TooManyAccents { requested: usize, dims: usize },

    #[error("corpus file corrupt: {0}")]
    CorpusCorrupt(String),

    #[error("input of {len} frames exceeds positional table of {max}")]
    InputTooLong { len: usize, max: usize },

    #[error("{what}: got {got}, expected {want}")]
    DimMismatch { what: String, got: usize, want: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("frozen parameters drifted: {0}")]
    FrozenDrift(String),

    #[error("stage {stage} failed: {reason}")]
    StageFailed { stage: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
