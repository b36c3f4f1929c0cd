use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("invalid index: {0}")]
    InvalidIndex(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },
    #[error("backward: {0}")]
    Backward(String),
    #[error("invalid grouping: {0}")]
    Grouping(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("plan format: {0}")]
    PlanFormat(String),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("training diverged at epoch {epoch}, step {step} (lr {lr:e}): loss is {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        lr: f64,
        loss: f64,
    },
    #[error("benchmark: {0}")]
    Bench(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
