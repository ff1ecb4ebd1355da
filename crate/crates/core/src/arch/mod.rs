//! Forward and feedback networks.

mod config;
mod layers;
mod model;

pub use config::{Head, MergeStrategy, ModelConfig, DEPTH_LEVELS, DOWNSAMPLE};
pub use layers::BN_MOMENTUM;
pub use model::{merge, reference_unet_parameter_count, BatchNormMode, Encoded, Group, LfbNet};
