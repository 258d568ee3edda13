//! Diffusion-based motion-trajectory estimation from blurred images.

pub mod condenc;
pub mod diffusion;
pub mod error;
pub mod losses;
pub mod model;
pub mod nn;
pub mod ops;
pub mod train;

pub use error::{NetError, Result};
pub use model::{ModelConfig, TrajDiff};
pub use train::{TrainConfig, TrainingSet, Variant};
