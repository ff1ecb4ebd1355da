//! Overlap, distance, volume and topology metrics on binary masks, and the
//! paired Wilcoxon signed-rank test.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor4;

/// Boolean grid of `depth` stacked slices, each `height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    dims: [usize; 3],
    /// Physical size of one voxel along (slice, row, column), in mm.
    spacing: [f64; 3],
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        Self::volume(1, height, width, data)
    }

    pub fn volume(depth: usize, height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != depth * height * width {
            return Err(shape_err(
                "BinaryMask",
                format!("{} values for {depth}x{height}x{width}", data.len()),
            ));
        }
        Ok(BinaryMask { dims: [depth, height, width], spacing: [1.0; 3], data })
    }

    pub fn from_labels(labels: &[u8], height: usize, width: usize, class: u8) -> Result<Self> {
        Self::new(height, width, labels.iter().map(|&l| l == class).collect())
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    fn check_same_grid(&self, other: &BinaryMask, op: &'static str) -> Result<()> {
        if self.dims != other.dims {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(())
    }

    /// Foreground voxels with a face neighbour outside the mask. The grid edge
    /// counts as outside. Slice neighbours are only considered for volumes.
    pub fn boundary(&self) -> Vec<[usize; 3]> {
        let [d, h, w] = self.dims;
        let mut out = Vec::new();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if !self.get(z, y, x) {
                        continue;
                    }
                    let mut edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
                    edge = edge
                        || !self.get(z, y - 1, x)
                        || !self.get(z, y + 1, x)
                        || !self.get(z, y, x - 1)
                        || !self.get(z, y, x + 1);
                    if d > 1 && !edge {
                        edge = z == 0 || z + 1 == d || !self.get(z - 1, y, x) || !self.get(z + 1, y, x);
                    }
                    if edge {
                        out.push([z, y, x]);
                    }
                }
            }
        }
        out
    }
}

/// 2|A∩B| / (|A|+|B|); two empty masks score 1.
pub fn dice_coefficient(pred: &BinaryMask, reference: &BinaryMask) -> Result<f64> {
    pred.check_same_grid(reference, "dice_coefficient")?;
    let inter = pred.data.iter().zip(&reference.data).filter(|(a, b)| **a && **b).count();
    let total = pred.count() + reference.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Exact symmetric Hausdorff distance between the boundary sets, in mm.
/// `None` when either mask is empty.
pub fn hausdorff_distance(pred: &BinaryMask, reference: &BinaryMask) -> Result<Option<f64>> {
    pred.check_same_grid(reference, "hausdorff_distance")?;
    let a = pred.boundary();
    let b = reference.boundary();
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let s = pred.spacing;
    let pa: Vec<[f64; 3]> = a.iter().map(|p| physical(p, s)).collect();
    let pb: Vec<[f64; 3]> = b.iter().map(|p| physical(p, s)).collect();
    let d2 = directed_sq(&pa, &pb).max(directed_sq(&pb, &pa));
    Ok(Some(d2.sqrt()))
}

fn physical(p: &[usize; 3], s: [f64; 3]) -> [f64; 3] {
    [p[0] as f64 * s[0], p[1] as f64 * s[1], p[2] as f64 * s[2]]
}

fn dist_sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// max over `from` of the min squared distance to `to`, with early break once a
/// point cannot raise the running maximum.
fn directed_sq(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let mut cmax = 0.0f64;
    for a in from {
        let mut cmin = f64::INFINITY;
        for b in to {
            let d = dist_sq(a, b);
            if d < cmin {
                cmin = d;
                if cmin <= cmax {
                    break;
                }
            }
        }
        if cmin > cmax {
            cmax = cmin;
        }
    }
    cmax
}

/// (V_pred − V_ref) / V_ref.
pub fn signed_volume_difference(pred: &BinaryMask, reference: &BinaryMask) -> Result<f64> {
    pred.check_same_grid(reference, "relative_volume_difference")?;
    if reference.is_empty() {
        return Err(Error::InvalidArgument("relative volume difference needs a non-empty reference".into()));
    }
    let vp = pred.count() as f64 * pred.voxel_volume();
    let vr = reference.count() as f64 * reference.voxel_volume();
    Ok((vp - vr) / vr)
}

/// |V_pred − V_ref| / V_ref.
pub fn relative_volume_difference(pred: &BinaryMask, reference: &BinaryMask) -> Result<f64> {
    signed_volume_difference(pred, reference).map(f64::abs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub components: usize,
    pub holes: usize,
}

/// 4-connected foreground components, and background components that do not
/// touch the border. Volumes are evaluated slice by slice and summed.
pub fn mask_topology(mask: &BinaryMask) -> Topology {
    let [d, h, w] = mask.dims;
    let mut total = Topology { components: 0, holes: 0 };
    for z in 0..d {
        let slice = &mask.data[z * h * w..(z + 1) * h * w];
        let (fg, _) = label_components(slice, h, w, true);
        let (_, bg_touching) = label_components(slice, h, w, false);
        total.components += fg;
        total.holes += bg_touching.iter().filter(|&&t| !t).count();
    }
    total
}

/// Counts 4-connected components of cells equal to `value`, and for each
/// component whether it touches the grid border.
fn label_components(cells: &[bool], h: usize, w: usize, value: bool) -> (usize, Vec<bool>) {
    let mut seen = vec![false; cells.len()];
    let mut touches = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..cells.len() {
        if seen[start] || cells[start] != value {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut border = false;
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / w, i % w);
            border |= y == 0 || x == 0 || y + 1 == h || x + 1 == w;
            let mut visit = |j: usize| {
                if !seen[j] && cells[j] == value {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        touches.push(border);
    }
    (touches.len(), touches)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityReport {
    /// Indexed by class; entry 0 is the background.
    pub per_class: Vec<Topology>,
}

impl PlausibilityReport {
    /// Holes plus components beyond the first, summed over foreground classes.
    pub fn violations(&self) -> usize {
        self.per_class
            .iter()
            .skip(1)
            .map(|t| t.holes + t.components.saturating_sub(1))
            .sum()
    }
}

pub fn plausibility_check(labels: &[u8], height: usize, width: usize, n_classes: usize) -> Result<PlausibilityReport> {
    if labels.len() != height * width {
        return Err(shape_err("plausibility_check", format!("{} labels for {height}x{width}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {n_classes} classes")));
    }
    let per_class = (0..n_classes)
        .map(|c| BinaryMask::from_labels(labels, height, width, c as u8).map(|m| mask_topology(&m)))
        .collect::<Result<_>>()?;
    Ok(PlausibilityReport { per_class })
}

/// Converts a probability map to per-image label grids: argmax over channels,
/// or a 0.5 threshold for a single channel.
pub fn probabilities_to_labels(probs: &Tensor4) -> Vec<Vec<u8>> {
    let [n, c, h, w] = probs.dims();
    let plane = h * w;
    (0..n)
        .map(|i| {
            let img = probs.image(i);
            (0..plane)
                .map(|p| {
                    if c == 1 {
                        u8::from(img[p] >= 0.5)
                    } else {
                        let mut best = 0;
                        for k in 1..c {
                            if img[k * plane + p] > img[best * plane + p] {
                                best = k;
                            }
                        }
                        best as u8
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum WilcoxonOutcome {
    Test {
        /// min(W+, W−)
        statistic: f64,
        p_value: f64,
        /// Nonzero differences used.
        n: usize,
        exact: bool,
    },
    InsufficientData {
        nonzero: usize,
    },
}

impl WilcoxonOutcome {
    pub fn p_value(&self) -> Option<f64> {
        match self {
            WilcoxonOutcome::Test { p_value, .. } => Some(*p_value),
            WilcoxonOutcome::InsufficientData { .. } => None,
        }
    }

    pub fn is_significant(&self, alpha: f64) -> bool {
        self.p_value().is_some_and(|p| p < alpha)
    }
}

pub const WILCOXON_MIN_N: usize = 5;
pub const WILCOXON_EXACT_MAX_N: usize = 12;

/// Average ranks of `values` (1-based), ties sharing the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided paired signed-rank test on `a − b`, zero differences dropped.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonOutcome> {
    if a.len() != b.len() {
        return Err(shape_err("wilcoxon_signed_rank", format!("{} vs {} samples", a.len(), b.len())));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidArgument("non-finite paired difference".into()));
    }
    let n = diffs.len();
    if n < WILCOXON_MIN_N {
        return Ok(WilcoxonOutcome::InsufficientData { nonzero: n });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let statistic = w_plus.min(total - w_plus);

    if n <= WILCOXON_EXACT_MAX_N {
        // Ranks are multiples of 1/2, so doubled ranks are integers.
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max_sum: usize = doubled.iter().sum();
        let mut counts = vec![0u64; max_sum + 1];
        counts[0] = 1;
        for &r in &doubled {
            for s in (r..=max_sum).rev() {
                counts[s] += counts[s - r];
            }
        }
        let observed = (2.0 * w_plus).round() as usize;
        let all = (1u64 << n) as f64;
        let lower: u64 = counts[..=observed].iter().sum();
        let upper: u64 = counts[observed..].iter().sum();
        let p_value = (2.0 * lower.min(upper) as f64 / all).min(1.0);
        return Ok(WilcoxonOutcome::Test { statistic, p_value, n, exact: true });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut ties = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (2.0 * (1.0 - normal.cdf(z))).min(1.0)
    };
    Ok(WilcoxonOutcome::Test { statistic, p_value, n, exact: false })
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
