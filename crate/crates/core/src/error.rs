use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("invalid tensor data: {0}")]
    Data(String),

    #[error("index {index} out of range for axis of length {len}")]
    Index { index: usize, len: usize },

    #[error("row {index} is degenerate (zero norm or zero row sum)")]
    DegenerateRow { index: usize },

    #[error("numerical failure: {msg}")]
    Numerical { msg: String, iterations: Option<usize> },

    #[error("empty input")]
    EmptyInput,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported tree: {0}")]
    UnsupportedTree(String),

    #[error("requested {requested} entries but only {available} are available")]
    Count { requested: usize, available: usize },

    #[error("scale ({j}, {jp}) out of range for depths ({depth_x}, {depth_y})")]
    Scale {
        j: usize,
        jp: usize,
        depth_x: usize,
        depth_y: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{axis} axis, iteration {iteration}: {source}")]
    Axis {
        axis: &'static str,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical {
            msg: msg.into(),
            iterations: None,
        }
    }

    /// Strips axis/iteration annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::Axis { source, .. } => source.root(),
            other => other,
        }
    }
}
