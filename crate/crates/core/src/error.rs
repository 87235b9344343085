use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss in module {level}")]
    NonFiniteLoss { level: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("invalid label {label} (classes: {classes})")]
    InvalidLabel { label: usize, classes: usize },

    #[error("idx format error at byte offset {offset}: {message}")]
    Idx { offset: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checksum mismatch in section `{section}`")]
    Checksum { section: String },

    #[error("budget violation: {0}")]
    Budget(String),

    #[error("{0}")]
    Invalid(String),

    #[error("run aborted at batch {batch} (replay with seed {seed}): {source}")]
    Aborted { batch: u32, seed: u64, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
