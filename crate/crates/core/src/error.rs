use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank { op: &'static str, expected: usize, shape: Vec<usize> },

    #[error("softmax: row {row} has no unmasked entry")]
    DegenerateRow { row: usize },

    #[error("attention: empty sequence")]
    EmptySequence,

    #[error("attention: window must be at least 1, got {0}")]
    Window(usize),

    #[error("linear attention: non-positive denominator {value} at position {position}")]
    NumericalDegeneracy { position: usize, value: f64 },

    #[error("plan: {param} = {value} must be divisible by {modulus}")]
    Plan { param: &'static str, value: usize, modulus: usize },

    #[error("plan: {0}")]
    InvalidPlan(String),

    #[error("plans are not comparable: {lhs_layers}x{lhs_heads} vs {rhs_layers}x{rhs_heads}")]
    Comparability { lhs_layers: usize, lhs_heads: usize, rhs_layers: usize, rhs_heads: usize },

    #[error("token id {token} is outside the vocabulary of size {vocab}")]
    Vocabulary { token: usize, vocab: usize },

    #[error("sequence length {len} exceeds the maximum of {max}")]
    Length { len: usize, max: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("data: {0}")]
    Data(String),

    #[error("config: {message} (keys: {})", keys.join(", "))]
    Config { keys: Vec<String>, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(keys: &[&str], message: impl Into<String>) -> Self {
        Error::Config { keys: keys.iter().map(|k| k.to_string()).collect(), message: message.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
