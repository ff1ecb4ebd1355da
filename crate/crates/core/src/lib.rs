//! Two-system image segmentation: an encoder-decoder forward network whose
//! decoder also consumes the latent code of a feedback network that re-reads
//! the forward network's own prediction.

pub mod arch;
pub mod data;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod metrics;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor4;
