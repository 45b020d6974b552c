//! Recursive part decomposition of point clouds.
//!
//! A shape is split top-down into a binary tree of adjacency and symmetry
//! nodes whose leaves are part instances. [`nets`] holds the network
//! blocks, [`model`] the recursive training and inference passes,
//! [`hierarchy`] the ground-truth trees, [`data`] a procedural shape
//! generator and [`eval`] the detection and semantic metrics.

pub mod data;
pub mod eval;
pub mod geom;
pub mod hierarchy;
pub mod model;
pub mod nets;

pub use partnet_autodiff as autodiff;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Autodiff(#[from] partnet_autodiff::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(format!("{e}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
