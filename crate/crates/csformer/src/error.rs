use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("tensors belong to different tapes")]
    TapeMismatch,

    #[error("tape already consumed by backward; start a new forward pass")]
    TapeConsumed,

    #[error("backward requires a scalar loss, got {0} elements")]
    NonScalarLoss(usize),

    #[error("backward requires a loss recorded on a tape")]
    LossNotOnTape,

    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },

    #[error("no gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: distinct codes per error family.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArg(_) => 3,
            Error::Io(_) | Error::Image(_) | Error::Json(_) => 4,
            Error::Checkpoint(_) => 5,
            _ => 6,
        }
    }
}
