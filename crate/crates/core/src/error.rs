use thiserror::Error;

/// Errors produced anywhere in the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value at step {step} in {op}")]
    NonFinite { step: usize, op: &'static str },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,

    #[error("invalid action {action} (environment has {num_actions} actions)")]
    InvalidAction { action: usize, num_actions: usize },

    #[error("environment episode has terminated; call reset first")]
    EpisodeOver,

    #[error("empty replay buffer")]
    EmptyBuffer,

    #[error("behavior policy gives zero probability to taken action {0}")]
    UnsupportedAction(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("wrong cell kind: {0}")]
    WrongKind(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(op: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { op, expected, got })
    }
}
