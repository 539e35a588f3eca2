//! 3D CNN with dual (channel + spatial) attention for volumetric binary
//! classification, plus the training, evaluation and attribution tooling
//! around it.

pub mod attention;
pub mod data;
pub mod error;
pub mod float;
pub mod gradcam;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use float::Float;
pub use model::{Backbone, ModelConfig};
pub use tensor::Tensor;
