//! Line-oriented dataset manifest.
//!
//! ```text
//! lfbnet-manifest 1
//! spec_hash <hex>
//! stats <mean> <std>        (or "stats - -")
//! <split> <image path> <label path> <seed>
//! ```
//! Paths are relative to the manifest's directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const HEADER: &str = "lfbnet-manifest 1";

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub split: Split,
    pub image: PathBuf,
    pub label: PathBuf,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub spec_hash: String,
    pub stats: Option<(f64, f64)>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries_in(split).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER}\nspec_hash {}\n", self.spec_hash);
        match self.stats {
            Some((m, sd)) => s.push_str(&format!("stats {m:?} {sd:?}\n")),
            None => s.push_str("stats - -\n"),
        }
        for e in &self.entries {
            s.push_str(&format!("{} {} {} {}\n", e.split, e.image.display(), e.label.display(), e.seed));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Format(format!("manifest line {line}: {msg}"));
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        match lines.next() {
            Some((_, HEADER)) => {}
            Some((i, other)) => return Err(bad(i, format!("expected `{HEADER}`, found `{other}`"))),
            None => return Err(bad(1, "empty manifest".into())),
        }
        let (i, line) = lines.next().ok_or_else(|| bad(2, "missing spec_hash".into()))?;
        let spec_hash = line
            .strip_prefix("spec_hash ")
            .ok_or_else(|| bad(i, "expected `spec_hash <hex>`".into()))?
            .to_string();
        let (i, line) = lines.next().ok_or_else(|| bad(3, "missing stats".into()))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let stats = match fields[..] {
            ["stats", "-", "-"] => None,
            ["stats", m, s] => Some((
                m.parse().map_err(|_| bad(i, format!("bad mean `{m}`")))?,
                s.parse().map_err(|_| bad(i, format!("bad std `{s}`")))?,
            )),
            _ => return Err(bad(i, "expected `stats <mean> <std>`".into())),
        };
        let mut entries = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            let [split, image, label, seed] = f[..] else {
                return Err(bad(i, format!("expected 4 fields, found {}", f.len())));
            };
            entries.push(ManifestEntry {
                split: split.parse().map_err(|e: Error| bad(i, e.to_string()))?,
                image: PathBuf::from(image),
                label: PathBuf::from(label),
                seed: seed.parse().map_err(|_| bad(i, format!("bad seed `{seed}`")))?,
            });
        }
        Ok(DatasetManifest { spec_hash, stats, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// Sizes of each split for `n` items by largest-remainder rounding.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n - sizes.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[k] += 1;
        left -= 1;
    }
    for (k, &s) in sizes.iter().enumerate() {
        if s == 0 {
            return Err(Error::InvalidArgument(format!(
                "split fractions {fractions:?} leave the {} split empty for {n} samples",
                Split::ALL[k]
            )));
        }
    }
    Ok(sizes)
}

/// Deterministic shuffled partition of `0..n` into (train, val, test).
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    let sizes = split_sizes(n, fractions)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val_start = sizes[0];
    let test_start = sizes[0] + sizes[1];
    Ok([idx[..val_start].to_vec(), idx[val_start..test_start].to_vec(), idx[test_start..].to_vec()])
}
