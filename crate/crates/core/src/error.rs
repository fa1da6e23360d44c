use std::io;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("audio too short: {len} samples, need at least {window}")]
    AudioTooShort { len: usize, window: usize },

    #[error("insufficient temporal extent: {have} frames, need at least {need}")]
    InsufficientTemporalExtent { have: usize, need: usize },

    #[error("{axis} extent {extent} is not divisible by patch size {patch}")]
    NotDivisible {
        axis: &'static str,
        extent: usize,
        patch: usize,
    },

    #[error("degenerate embedding: pooled vector has zero norm")]
    DegenerateEmbedding,

    #[error("contrastive loss needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),

    #[error("target unalignable: {frames} frames cannot hold a target needing {needed}")]
    Unalignable { frames: usize, needed: usize },

    #[error("reference sequence is empty")]
    EmptyReference,

    #[error("label {label} outside head range 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("target sequence must start with BOS and end with EOS")]
    MissingBoundaryTokens,

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("loss function is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("encoder weights are frozen during fine-tuning and cannot be unfrozen")]
    EncoderUnfreeze,

    #[error("incompatible encoder configuration: {0}")]
    IncompatibleConfig(String),

    #[error("invalid stage: {0}")]
    Stage(String),

    #[error("invalid value `{value}` for {field}; valid values: {valid}")]
    InvalidEnum {
        field: &'static str,
        value: String,
        valid: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("unsupported WAV format tag 0x{tag:04x} ({name}); only 16-bit PCM mono is supported")]
    UnsupportedWavFormat { tag: u16, name: &'static str },

    #[error("unsupported audio layout: {0}")]
    UnsupportedAudio(String),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("checksum mismatch in tensor `{0}`")]
    Checksum(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
