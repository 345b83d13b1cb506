use thiserror::Error;

#[derive(Debug, Error)]
pub enum DimoError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("diffusion step {t} outside 1..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("mask generation failed: {0}")]
    Mask(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("sampler failed after {completed} of {requested} runs: {reason}")]
    Sampler { completed: usize, requested: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, DimoError>;

pub(crate) fn check_step(t: usize, max: usize) -> Result<()> {
    if t == 0 || t > max {
        return Err(DimoError::StepOutOfRange { t, max });
    }
    Ok(())
}
