//! Context-aggregation segmentation pipeline: image-level and semantic-level
//! context modules, similarity-weighted fusion, multi-task training, a
//! synthetic data harness and an analytic complexity profiler.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod ilcm;
pub mod loss;
pub mod model;
pub mod probes;
pub mod profiler;
pub mod slcm;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{IsnetError, Result};
pub use tensor::{Scalar, Tensor};
