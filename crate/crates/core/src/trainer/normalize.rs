use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Global intensity mean and (population) standard deviation.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn apply(&self, x: &Tensor4) -> Tensor4 {
        x.map(|v| (v - self.mean) / self.std)
    }

    pub fn invert(&self, x: &Tensor4) -> Tensor4 {
        x.map(|v| v * self.std + self.mean)
    }
}

pub fn compute_stats(data: &Dataset) -> Result<NormStats> {
    let count: usize = data.images.iter().map(|t| t.len()).sum();
    if count == 0 {
        return Err(Error::Dataset("cannot compute statistics of an empty dataset".into()));
    }
    let mean = data.images.iter().map(|t| t.sum()).sum::<f64>() / count as f64;
    let var = data
        .images
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / count as f64;
    let std = var.sqrt();
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        return Err(Error::Dataset("constant dataset has zero standard deviation".into()));
    }
    Ok(NormStats { mean, std })
}

pub fn normalize(data: &Dataset, stats: NormStats) -> Result<Dataset> {
    if !(stats.std > 0.0) {
        return Err(Error::InvalidArgument(format!("standard deviation {} must be positive", stats.std)));
    }
    let mut out = data.clone();
    for img in &mut out.images {
        *img = stats.apply(img);
    }
    Ok(out)
}
