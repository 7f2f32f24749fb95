use std::path::PathBuf;

use thiserror::Error;

use crate::generalization::MixMode;
use crate::pools::SampleId;

pub type Result<T, E = CegError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CegError {
    #[error("non-finite numeric input: {0}")]
    NumericInput(String),
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("degenerate (zero-norm) vector")]
    DegenerateVector,
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty pool")]
    EmptyPool,
    #[error("budget violation: {0}")]
    Budget(String),
    #[error("sample {0} is already labeled")]
    DoubleQuery(SampleId),
    #[error("sample {0} is not in the unlabeled pool")]
    UnknownSample(SampleId),
    #[error("no labeled knowledge available (empty centroid set or labeled pool)")]
    EmptyKnowledge,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("inconsistent inputs: {0}")]
    Consistency(String),
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("{0:?} mixing has no eligible pair")]
    ModeUnavailable(MixMode),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn ensure_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(CegError::Shape {
            context,
            expected,
            got,
        })
    }
}
