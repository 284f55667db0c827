//! Self-reflective hierarchical variational autoencoders.

pub mod autodiff;
pub mod bijectors;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distributions;
pub mod error;
pub mod hierarchy;
pub mod made;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod params;
pub mod rng;
pub mod run;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
