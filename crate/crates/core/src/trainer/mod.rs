//! Alternating training of the forward and feedback networks, inference,
//! normalization and checkpoints.

mod checkpoint;
mod config;
mod normalize;
mod protocol;

pub use checkpoint::{CheckpointBundle, CheckpointMeta};
pub use config::{Protocol, TrainConfig};
pub use normalize::{compute_stats, normalize, NormStats};
pub use protocol::{
    epoch_order, evaluate, infer, objective, step1_train_forward, step2_train_feedback, step3_inputs, step3_loss,
    step3_train_decoder, target_channels, train_loop, CycleSummary, DecoderInputs, HistoryRow, Step, StepContext, TrainOutcome,
    TrainState,
};
