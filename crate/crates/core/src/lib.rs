//! Desk-scale emulator for satellite surface-solar-radiation retrieval.
//!
//! A synthetic world ([`scene`]) produces pseudo-satellite imagery and
//! irradiance targets; [`dataset`] windows and normalises it; [`tsvit`] and
//! [`conv`] are the two regressors; [`training`] fits them and
//! [`evaluation`] runs the metric, context, ablation and permutation
//! experiments. [`pipeline`] ties the stages to run directories.

pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod dataset;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod pipeline;
pub mod scene;
pub mod training;
pub mod tsvit;

pub use hemulab_geo as geo;
pub use hemulab_tensor as tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error(transparent)]
    Tensor(#[from] hemulab_tensor::TensorError),
    #[error(transparent)]
    Geo(#[from] hemulab_geo::GeoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
