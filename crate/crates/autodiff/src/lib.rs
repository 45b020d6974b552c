//! Reverse-mode differentiation over small dense matrices.
//!
//! Everything the recursive segmentation networks need and nothing more:
//! shared per-point linear maps, activations, per-point normalization,
//! max-pooling over points, column concatenation, dropout, cross-entropy
//! and squared-error losses, an Adam optimizer and a binary checkpoint
//! format. All graphs are generic over [`Real`] so the same code runs in
//! `f32` for training and `f64` for finite-difference checks.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod params;
mod real;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use params::{ParamId, ParamStore};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch { op: &'static str, expected: String, got: String },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("backward needs a scalar loss, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("duplicate parameter name '{0}'")]
    DuplicateParam(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
