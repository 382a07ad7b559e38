pub mod accounting;
pub mod aggregation;
pub mod analysis;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod cost_volume;
pub mod data;
pub mod error;
pub mod features;
pub mod ghost;
pub mod gradcheck;
pub mod inference;
pub mod model;
pub mod nn;
pub mod regression;
pub mod tensor;
pub mod train;
pub mod types;

pub use config::{ModelConfig, Preset};
pub use error::{Error, Result};
pub use model::{GhostStereo, Prediction};
pub use tensor::Tensor;
pub use types::{validate_sample, DisparityMap, StereoSample};
