use std::path::PathBuf;

use gelina_tensor::CheckpointError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("length {len} is not divisible by {factor}")]
    LengthNotDivisible { len: usize, factor: usize },
    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("non-finite sampler state at step {step}")]
    NonFiniteState { step: usize },
    #[error("sample rate mismatch: expected {expected} Hz, got {got} Hz")]
    SampleRateMismatch { expected: u32, got: u32 },
    #[error("insufficient data: need {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("vocabulary size {0} leaves no room for merges (must exceed 256)")]
    VocabTooSmall(usize),
    #[error("ratio mismatch: expected {expected} gesture tokens, got {got}")]
    RatioMismatch { expected: usize, got: usize },
    #[error("malformed stream at body position {0}")]
    MalformedStream(usize),
    #[error("context overflow: {len} positions exceed context length {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sequence too short: {0} frames")]
    SequenceTooShort(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("too few clips: need {needed}, got {got}")]
    TooFewClips { needed: usize, got: usize },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("version mismatch: {0}")]
    VersionMismatch(String),
    #[error("duration mismatch: speech {speech_s:.4} s vs motion {motion_s:.4} s")]
    DurationMismatch { speech_s: f64, motion_s: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
