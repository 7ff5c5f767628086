use thiserror::Error;

use crate::neural::Mlp;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("negative weight {value} at index {index}")]
    NegativeWeight { index: usize, value: f64 },

    #[error("total mass is zero")]
    ZeroMass,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{name} = {value} is out of range ({allowed})")]
    OutOfRange { name: &'static str, value: f64, allowed: &'static str },

    #[error("wrong dataset kind: expected {expected}, got {got}")]
    WrongKind { expected: &'static str, got: &'static str },

    #[error("no training data")]
    NoData,

    #[error("unknown label {0}")]
    UnknownLabel(usize),

    #[error("training diverged (non-finite loss) at iteration {iteration}")]
    Diverged { iteration: usize, checkpoint: Box<Mlp> },

    /// `line` is 0 for errors not tied to one line.
    #[error("{}", config_message(*line, message))]
    Config { line: usize, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn config_message(line: usize, message: &str) -> String {
    if line == 0 {
        format!("config: {message}")
    } else {
        format!("config line {line}: {message}")
    }
}

impl Error {
    pub(crate) fn non_finite(what: impl Into<String>) -> Self {
        Error::NonFinite(what.into())
    }
}
