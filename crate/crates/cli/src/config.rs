use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use lfbnet::arch::ModelConfig;
use lfbnet::data::PhantomSpec;
use lfbnet::experiment::Variant;
use lfbnet::trainer::TrainConfig;

/// One experiment: where the data come from, how to build and train the
/// model, and where results go. Relative paths resolve against the config
/// file's directory.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    pub out_dir: PathBuf,
    /// Existing manifest; mutually exclusive with `phantom`.
    pub dataset: Option<PathBuf>,
    /// Generate data on the fly (written under `out_dir/data`).
    pub phantom: Option<PhantomSpec>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_variant() -> Variant {
    Variant::Lfb
}

fn default_samples() -> usize {
    100
}

fn default_split() -> [f64; 3] {
    [0.7, 0.2, 0.1]
}

impl ExperimentConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text)?;
        match (&cfg.dataset, &cfg.phantom) {
            (Some(_), Some(_)) => bail!("give either `dataset` or `[phantom]`, not both"),
            (None, None) => bail!("no data source: set `dataset` or add a `[phantom]` table"),
            _ => {}
        }
        if let Some(p) = &cfg.phantom {
            if p.n_classes() != cfg.model.n_classes {
                bail!("phantom has {} classes but the model is built for {}", p.n_classes(), cfg.model.n_classes);
            }
            if p.image_size != cfg.model.input_size {
                bail!("phantom size {:?} differs from model input size {:?}", p.image_size, cfg.model.input_size);
            }
        }
        cfg.out_dir = base.join(&cfg.out_dir);
        cfg.dataset = cfg.dataset.map(|d| base.join(d));
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("in config {}", path.display()))
    }
}
