//! Synthetic phantom datasets and their on-disk formats.

pub mod io;
mod manifest;
mod phantom;

use std::fs;
use std::path::{Path, PathBuf};

pub use manifest::{split_indices, split_sizes, DatasetManifest, ManifestEntry, Split};
pub use phantom::{generate, sample_seed, Degradation, Geometry, PhantomKind, PhantomSpec};

use crate::error::{Error, Result};
use crate::loss::encode_target;
use crate::tensor::Tensor4;

/// One image with its class-index grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// [1, 1, H, W]
    pub image: Tensor4,
    pub label: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub spec_hash: String,
}

pub fn write_sample(sample: &Sample, image_path: &Path, label_path: &Path) -> Result<()> {
    io::write_image(image_path, &sample.image)?;
    io::write_labels(label_path, &sample.label, sample.height, sample.width)
}

pub fn read_sample(image_path: &Path, label_path: &Path, seed: u64, spec_hash: &str) -> Result<Sample> {
    let image = io::read_image(image_path)?;
    let (label, height, width) = io::read_labels(label_path)?;
    if image.dims() != [1, 1, height, width] {
        return Err(Error::Format(format!(
            "image {:?} does not pair with {height}x{width} labels ({})",
            image.dims(),
            image_path.display()
        )));
    }
    Ok(Sample { image, label, height, width, seed, spec_hash: spec_hash.to_string() })
}

/// Writes samples under `dir` (images/, labels/) and a manifest at
/// `dir/manifest.txt`, split by `fractions` (train, val, test).
pub fn write_dataset(dir: &Path, samples: &[Sample], fractions: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    let spec_hash = samples.first().map(|s| s.spec_hash.clone()).unwrap_or_default();
    let parts = split_indices(samples.len(), fractions, seed)?;
    let mut split_of = vec![Split::Train; samples.len()];
    for (split, idx) in Split::ALL.iter().zip(&parts) {
        for &i in idx {
            split_of[i] = *split;
        }
    }
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image = PathBuf::from(format!("images/{i:05}.lfbt"));
        let label = PathBuf::from(format!("labels/{i:05}.lfbt"));
        write_sample(s, &dir.join(&image), &dir.join(&label))?;
        entries.push(ManifestEntry { split: split_of[i], image, label, seed: s.seed });
    }
    let manifest = DatasetManifest { spec_hash, stats: None, entries };
    manifest.write(&dir.join("manifest.txt"))?;
    Ok(manifest)
}

/// In-memory images and labels of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub ids: Vec<String>,
    /// Each [1, 1, H, W].
    pub images: Vec<Tensor4>,
    pub labels: Vec<Vec<u8>>,
}

impl Dataset {
    pub fn from_samples(samples: &[Sample], n_classes: usize) -> Result<Self> {
        Self::from_samples_with_ids(samples, n_classes, (0..samples.len()).map(|i| format!("{i:05}")).collect())
    }

    pub fn from_samples_with_ids(samples: &[Sample], n_classes: usize, ids: Vec<String>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Dataset("empty dataset".into()))?;
        let (height, width) = (first.height, first.width);
        for s in samples {
            if (s.height, s.width) != (height, width) {
                return Err(Error::Dataset(format!("mixed sizes {height}x{width} and {}x{}", s.height, s.width)));
            }
            if let Some(&l) = s.label.iter().find(|&&l| l as usize >= n_classes) {
                return Err(Error::Dataset(format!("label {l} out of range for {n_classes} classes")));
            }
        }
        Ok(Dataset {
            height,
            width,
            n_classes,
            ids,
            images: samples.iter().map(|s| s.image.clone()).collect(),
            labels: samples.iter().map(|s| s.label.clone()).collect(),
        })
    }

    /// Loads one split of a manifest; ids are the image file stems.
    pub fn load(manifest_path: &Path, split: Split, n_classes: usize) -> Result<Self> {
        let manifest = DatasetManifest::read(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let mut samples = Vec::new();
        let mut ids = Vec::new();
        for e in manifest.entries_in(split) {
            samples.push(read_sample(&root.join(&e.image), &root.join(&e.label), e.seed, &manifest.spec_hash)?);
            ids.push(e.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        }
        if samples.is_empty() {
            return Err(Error::Dataset(format!("split `{split}` of {} is empty", manifest_path.display())));
        }
        Self::from_samples_with_ids(&samples, n_classes, ids)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacked images [b, 1, H, W] and one-hot targets with `target_channels`.
    pub fn batch(&self, indices: &[usize], target_channels: usize) -> Result<(Tensor4, Tensor4)> {
        let images: Vec<&Tensor4> = indices.iter().map(|&i| &self.images[i]).collect();
        let x = Tensor4::stack(&images)?;
        let labels: Vec<&[u8]> = indices.iter().map(|&i| self.labels[i].as_slice()).collect();
        let t = encode_target(&labels, self.height, self.width, target_channels)?;
        Ok((x, t))
    }
}
