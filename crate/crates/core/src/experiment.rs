//! Ablation variants: the forward network alone, the forward network without
//! squeeze-excitation, and the full feedback-loop system.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arch::{LfbNet, ModelConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::trainer::{train_loop, Protocol, TrainConfig, TrainOutcome};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Fs,
    FsStar,
    Lfb,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Fs, Variant::FsStar, Variant::Lfb];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Fs => "fs",
            Variant::FsStar => "fs_star",
            Variant::Lfb => "lfb",
        }
    }

    /// Rewrites a base configuration pair into this variant's.
    pub fn configure(self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let (use_se, feedback, protocol) = match self {
            Variant::Fs => (true, false, Protocol::ForwardOnly),
            Variant::FsStar => (false, false, Protocol::ForwardOnly),
            Variant::Lfb => (true, true, Protocol::FeedbackLoop),
        };
        (ModelConfig { use_se, feedback, ..model.clone() }, TrainConfig { protocol, ..train.clone() })
    }

    /// Builds and trains this variant. `init_seed` seeds the weights; the
    /// data order comes from `train.seed`.
    pub fn train(
        self,
        model: &ModelConfig,
        train: &TrainConfig,
        init_seed: u64,
        train_set: &Dataset,
        val_set: &Dataset,
    ) -> Result<(LfbNet, TrainOutcome)> {
        let (model, train) = self.configure(model, train);
        let mut net = LfbNet::new(model, init_seed)?;
        let outcome = train_loop(&mut net, train_set, val_set, &train)?;
        Ok((net, outcome))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}` (expected fs, fs_star or lfb)")))
    }
}
