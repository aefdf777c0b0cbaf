use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("row {row} has zero absolute sum and cannot be normalized")]
    ZeroRow { row: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("image {height}x{width} is not divisible into {unit}x{unit} cells")]
    IndivisibleGrid {
        height: usize,
        width: usize,
        unit: usize,
    },

    #[error("aggregation groups do not partition the token set: {0}")]
    NonPartition(String),

    #[error("layer count mismatch: expected {expected}, got {got}")]
    LayerCountMismatch { expected: usize, got: usize },

    #[error("forward trace is stale or incomplete: {0}")]
    StaleTrace(String),

    #[error("non-finite loss at sample {sample}")]
    NonFiniteLoss { sample: usize },

    #[error("token {token} has zero norm")]
    ZeroNorm { token: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
