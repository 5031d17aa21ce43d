use std::path::PathBuf;

/// Errors produced anywhere in the enhancement pipeline.
#[derive(Debug, thiserror::Error)]
pub enum SimiError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt image data: {0}")]
    CorruptData(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("expected 3 colour channels, got {0}")]
    ChannelCountMismatch(usize),
    #[error("bit-plane stack holds a non-binary value {0}")]
    NonBinaryValue(f64),
    #[error("quantizer level count must be at least 2, got {0}")]
    InvalidLevelCount(u32),
    #[error("stride must be positive")]
    NonPositiveStride,
    #[error("denominator magnitude {value:e} is below the floor {floor:e}")]
    DivisionRangeViolation { value: f64, floor: f64 },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("trace holds no curve pairs")]
    EmptyTrace,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no loadable images in {0}")]
    EmptyDataset(PathBuf),
    #[error("loss diverged at step {step}; last good checkpoint: {last_checkpoint:?}")]
    DivergedLoss {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("checkpoint config digest does not match the requested configuration")]
    ConfigDigestMismatch,
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("image dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("image side {0} is smaller than the 11-pixel SSIM window")]
    ImageTooSmall(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = SimiError> = std::result::Result<T, E>;
