use std::io;

use thiserror::Error;

use crate::tensor::Coord3;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("coordinate component {value} out of range for bit depth {bit_depth}")]
    Range { value: u32, bit_depth: u8 },

    #[error("duplicate coordinate ({}, {}, {})", .0.x, .0.y, .0.z)]
    DuplicateCoord(Coord3),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("missing layer path `{0}`")]
    MissingPath(String),

    #[error("stage protocol violation: {0}")]
    Protocol(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("range decoder read past the end of its buffer")]
    Underflow,

    #[error("decode error: {0}")]
    Decode(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("weight hash mismatch: stream expects {expected}, weights hash to {found}")]
    WeightMismatch { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}
