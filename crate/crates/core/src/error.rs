use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid {rows}x{cols} cannot host task {task}")]
    GridTooSmall { task: String, rows: usize, cols: usize },
    #[error("unknown task `{0}`")]
    BadTask(String),
    #[error("instruction template for {task} is missing slot `{slot}`")]
    MissingSlot { task: String, slot: String },
    #[error("scripted step is not realizable: {0}")]
    Unrealizable(String),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("perturbation pool has no usable trajectory")]
    EmptyPool,
    #[error("trajectory too short ({0} frames)")]
    TooShort(usize),
    #[error("no in-scene substitute for {0}")]
    NoSubstitute(String),
    #[error("unknown perturbation kind `{0}`")]
    BadKind(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("missing parameters: {0}")]
    MissingParams(String),
    #[error("format error: {0}")]
    FormatError(String),
    #[error("out-of-vocabulary word `{0}`")]
    OovToken(String),
    #[error("token id {0} is outside the vocabulary")]
    BadId(usize),
    #[error("sequence length {len} exceeds maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("trajectory prefix length {t} is outside 1..={len}")]
    BadT { t: usize, len: usize },
    #[error("loss became non-finite at step {0}")]
    NaNLoss(usize),
    #[error("cell {task}/{variant} has {n} items, fewer than {min}")]
    EmptyCell { task: String, variant: String, n: usize, min: usize },
    #[error("language model did not reach perplexity {target:.3} (got {got:.3})")]
    DidNotConverge { got: f64, target: f64 },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
