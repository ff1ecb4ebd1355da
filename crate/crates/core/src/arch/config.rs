use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of 2×2 pooling stages between the input and the latent code.
pub const DEPTH_LEVELS: usize = 3;
/// Spatial contraction factor of the latent code.
pub const DOWNSAMPLE: usize = 1 << DEPTH_LEVELS;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Sigmoid,
    Softmax,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeStrategy {
    Concat,
    Add,
    Multiply,
}

impl MergeStrategy {
    /// Channel count entering the decoder for a latent with `c` channels.
    pub fn output_channels(self, c: usize) -> usize {
        match self {
            MergeStrategy::Concat => 2 * c,
            MergeStrategy::Add | MergeStrategy::Multiply => c,
        }
    }

    /// The feedback latent that leaves the forward latent untouched.
    pub fn neutral_value(self) -> f64 {
        match self {
            MergeStrategy::Multiply => 1.0,
            MergeStrategy::Concat | MergeStrategy::Add => 0.0,
        }
    }
}

impl FromStr for MergeStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "concat" => Ok(MergeStrategy::Concat),
            "add" => Ok(MergeStrategy::Add),
            "multiply" | "mul" => Ok(MergeStrategy::Multiply),
            other => Err(Error::InvalidArgument(format!("unknown merge strategy `{other}`"))),
        }
    }
}

impl fmt::Display for MergeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeStrategy::Concat => "concat",
            MergeStrategy::Add => "add",
            MergeStrategy::Multiply => "multiply",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// (H, W) of the training images.
    pub input_size: [usize; 2],
    pub in_channels: usize,
    pub n_classes: usize,
    pub base_channels: usize,
    pub latent_channels: usize,
    pub head: Head,
    pub merge: MergeStrategy,
    pub use_se: bool,
    /// Build the feedback network and the merge path into the decoder.
    pub feedback: bool,
    pub conv_repeats: usize,
    /// Conv units in the bottleneck and bridge blocks.
    pub latent_repeats: usize,
    pub feedback_base_channels: usize,
    pub se_reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: [256, 256],
            in_channels: 1,
            n_classes: 4,
            base_channels: 32,
            latent_channels: 256,
            head: Head::Softmax,
            merge: MergeStrategy::Concat,
            use_se: true,
            feedback: true,
            conv_repeats: 2,
            latent_repeats: 4,
            feedback_base_channels: 16,
            se_reduction: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(Error::InvalidArgument(format!(
                "input size {h}x{w} must be positive multiples of {DOWNSAMPLE}"
            )));
        }
        match self.head {
            Head::Sigmoid if self.n_classes != 1 => {
                return Err(Error::InvalidArgument(format!(
                    "sigmoid head needs n_classes = 1, got {}",
                    self.n_classes
                )))
            }
            Head::Softmax if self.n_classes < 2 => {
                return Err(Error::InvalidArgument(format!(
                    "softmax head needs n_classes >= 2, got {}",
                    self.n_classes
                )))
            }
            _ => {}
        }
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("base_channels", self.base_channels),
            ("latent_channels", self.latent_channels),
            ("conv_repeats", self.conv_repeats),
            ("latent_repeats", self.latent_repeats),
            ("feedback_base_channels", self.feedback_base_channels),
            ("se_reduction", self.se_reduction),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.use_se {
            for c in self.forward_widths().into_iter().chain([self.latent_channels]) {
                if c % self.se_reduction != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "channel width {c} not divisible by SE reduction {}",
                        self.se_reduction
                    )));
                }
            }
        }
        Ok(())
    }

    /// Widths of the three forward encoder stages.
    pub fn forward_widths(&self) -> [usize; DEPTH_LEVELS] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b]
    }

    pub fn feedback_widths(&self) -> [usize; DEPTH_LEVELS] {
        let b = self.feedback_base_channels;
        [b, 2 * b, 4 * b]
    }

    pub fn latent_dims(&self, n: usize, h: usize, w: usize) -> [usize; 4] {
        [n, self.latent_channels, h / DOWNSAMPLE, w / DOWNSAMPLE]
    }
}
