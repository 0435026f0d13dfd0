use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("softmax column {0} has no unmasked entry")]
    EmptyAttentionColumn(usize),

    #[error("kernel size must be odd, got {0}")]
    EvenKernel(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {0} is outside the vocabulary")]
    TokenOutOfRange(usize),

    #[error("gradient tape was already consumed by a backward pass")]
    TapeConsumed,

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}
