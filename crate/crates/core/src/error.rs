use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate depth {depth} (|z| must exceed {epsilon})")]
    DegenerateDepth { depth: f64, epsilon: f64 },

    #[error("invalid camera `{cam_id}`: {reason}")]
    InvalidCamera { cam_id: String, reason: String },

    #[error("root joint {root} is missing")]
    MissingRoot { root: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("state mismatch: {0}")]
    State(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid frame: {0}")]
    InvalidFrame(String),

    #[error("insufficient views: {found} usable, at least {needed} required")]
    InsufficientViews { found: usize, needed: usize },

    #[error("degenerate configuration (condition number {condition:e})")]
    DegenerateConfiguration { condition: f64 },

    #[error("no joint could be reconstructed")]
    EmptyReconstruction,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("frame {seq}/{frame}: {reason}")]
    FrameInvariant {
        seq: String,
        frame: u64,
        reason: String,
    },

    #[error("joint count mismatch: expected {expected}, found {found}")]
    JointCount { expected: usize, found: usize },

    #[error("at least 3 distinct sequences are required, found {0}")]
    InsufficientSequences(usize),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
