use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::ClassWeights;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Step 1 only, validated without feedback.
    ForwardOnly,
    /// Steps 1-3 per cycle, validated with the feedback loop.
    FeedbackLoop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Cycles without a validation-loss improvement before stopping.
    pub early_stop_patience: usize,
    pub max_cycles: usize,
    pub seed: u64,
    pub protocol: Protocol,
    /// Feedback iterations used for validation and test-time inference.
    pub test_feedback_iterations: usize,
    /// Per-class Dice weights; uniform when absent.
    pub class_weights: Option<Vec<f64>>,
    /// Stop as soon as mean foreground validation Dice reaches this value.
    pub target_val_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 10,
            early_stop_patience: 100,
            max_cycles: 1000,
            seed: 0,
            protocol: Protocol::FeedbackLoop,
            test_feedback_iterations: 1,
            class_weights: None,
            target_val_dice: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.early_stop_patience == 0 || self.max_cycles == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, early_stop_patience and max_cycles must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }

    pub fn weights(&self, n_classes: usize) -> Result<ClassWeights> {
        match &self.class_weights {
            None => Ok(ClassWeights::uniform(n_classes)),
            Some(w) if w.len() == n_classes => ClassWeights::new(w.clone()),
            Some(w) => Err(Error::InvalidArgument(format!("{} class weights for {n_classes} classes", w.len()))),
        }
    }

    /// Feedback iterations applied when validating under this protocol.
    pub fn validation_iterations(&self) -> usize {
        match self.protocol {
            Protocol::ForwardOnly => 0,
            Protocol::FeedbackLoop => self.test_feedback_iterations,
        }
    }
}
