//! Error type shared across the workspace.
//!
//! In-math shape contracts (mismatched operand shapes, rank violations) are
//! enforced with assertions and panic: they are programmer errors, not
//! recoverable conditions. Everything that touches the filesystem, user
//! configuration, or wire formats returns `Result<_, Error>`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an API contract in a way that is detected at a
    /// fallible boundary (config validation, checkpoint compatibility).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown dataset {name:?}; valid names: {valid}")]
    UnknownDataset { name: String, valid: &'static str },

    #[error("config parse error at line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("unknown config key {key:?} at line {line}")]
    UnknownConfigKey { key: String, line: usize },

    #[error("invalid value for config key {key:?}: {msg}")]
    InvalidConfigValue { key: String, msg: String },

    #[error("corrupt checkpoint: {0}")]
    CheckpointFormat(String),

    #[error("incompatible checkpoint: {0}")]
    CheckpointIncompatible(String),

    #[error("training aborted at step {step}: {streak} consecutive non-finite losses")]
    NonFiniteAbort { step: usize, streak: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
