//! Error types shared across the crate.

use thiserror::Error;

/// Transaction state-machine misuse. These are logic errors in the caller,
/// not recoverable runtime conditions.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum TxnError {
    #[error("begin_iteration called while an iteration is already open")]
    AlreadyOpen,
    #[error("commit/abort called with no open iteration")]
    NotOpen,
}

/// Protocol-level failures. `MissingLogEntry` surfacing during a local
/// rollback means the rollback decision was wrong and indicates a protocol
/// bug, not a user error.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("payload log has no entry for iter {iter} dst {dst} seq {seq}")]
    MissingLogEntry { iter: u64, dst: usize, seq: u32 },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("no checkpoint present for rank {rank}")]
    Missing { rank: usize },
    #[error("checkpoint for rank {rank} failed validation: {reason}")]
    Corrupt { rank: usize, reason: String },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
}

/// Top-level error for a simulation run. The CLI maps each variant to a
/// distinct exit code.
#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("protocol bug: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("verification mismatch: {0}")]
    Verification(String),
}

impl From<serde_json::Error> for RunError {
    fn from(e: serde_json::Error) -> Self {
        RunError::Config(ConfigError::Invalid(format!("json: {e}")))
    }
}
