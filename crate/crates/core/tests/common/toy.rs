#![allow(dead_code)]

use lfbnet::arch::{LfbNet, ModelConfig};
use lfbnet::data::{generate, Dataset, Degradation, PhantomKind, PhantomSpec};
use lfbnet::trainer::{TrainConfig, StepContext};

pub fn toy_spec(seed: u64) -> PhantomSpec {
    PhantomSpec { image_size: [32, 32], seed, ..Default::default() }
}

pub fn toy_data(seed: u64, n: usize) -> Dataset {
    Dataset::from_samples(&generate(&toy_spec(seed), n).unwrap(), 4).unwrap()
}

/// Single bright disk on a dark background, binary labels.
pub fn blob_data(seed: u64, n: usize) -> Dataset {
    let spec = PhantomSpec {
        kind: PhantomKind::Multicomponent,
        image_size: [64, 64],
        degradation: Degradation { noise_sigma: 0.02, ..Default::default() },
        seed,
        ..Default::default()
    };
    Dataset::from_samples(&generate(&spec, n).unwrap(), 2).unwrap()
}

pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        input_size: [32, 32],
        n_classes: 4,
        base_channels: 8,
        latent_channels: 16,
        feedback_base_channels: 8,
        conv_repeats: 1,
        latent_repeats: 1,
        ..Default::default()
    }
}

pub fn toy_net(seed: u64) -> LfbNet {
    LfbNet::new(toy_model_config(), seed).unwrap()
}

pub fn toy_train_config() -> TrainConfig {
    TrainConfig { batch_size: 5, max_cycles: 3, ..Default::default() }
}

pub fn ctx<'a>(data: &'a Dataset, order: &'a [usize], weights: &'a lfbnet::loss::ClassWeights) -> StepContext<'a> {
    StepContext { data, order, batch_size: 5, weights }
}
