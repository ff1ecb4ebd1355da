//! Per-sample evaluation reports, paired comparisons and ablation tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::LfbNet;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{
    dice_coefficient, hausdorff_distance, mask_topology, mean_std, probabilities_to_labels, relative_volume_difference,
    wilcoxon_signed_rank, BinaryMask, WilcoxonOutcome,
};
use crate::tensor::Tensor4;
use crate::trainer::{infer, NormStats};

pub const SIGNIFICANCE: f64 = 0.05;
const RECOMPUTE_TOLERANCE: f64 = 1e-9;

/// Anything that maps a single raw image `[1, 1, H, W]` to a label grid.
pub trait Segmenter: Sync {
    fn segment(&self, id: &str, image: &Tensor4) -> Result<Vec<u8>>;
}

/// A trained network plus the normalization it was trained with.
pub struct ModelSegmenter<'a> {
    pub net: &'a LfbNet,
    pub stats: NormStats,
    pub iterations: usize,
}

impl Segmenter for ModelSegmenter<'_> {
    fn segment(&self, _id: &str, image: &Tensor4) -> Result<Vec<u8>> {
        let [_, c, h, w] = image.dims();
        let cfg = self.net.config();
        if c != cfg.in_channels || [h, w] != cfg.input_size {
            return Err(Error::Shape {
                op: "segment",
                detail: format!(
                    "image is {c}x{h}x{w} but the model expects {}x{}x{}",
                    cfg.in_channels, cfg.input_size[0], cfg.input_size[1]
                ),
            });
        }
        let y = infer(self.net, &self.stats.apply(image), self.iterations)?;
        Ok(probabilities_to_labels(&y).swap_remove(0))
    }
}

/// Returns stored label grids by sample id.
pub struct LookupSegmenter {
    pub labels: BTreeMap<String, Vec<u8>>,
}

impl LookupSegmenter {
    pub fn ground_truth(data: &Dataset) -> Self {
        Self { labels: data.ids.iter().cloned().zip(data.labels.iter().cloned()).collect() }
    }
}

impl Segmenter for LookupSegmenter {
    fn segment(&self, id: &str, _image: &Tensor4) -> Result<Vec<u8>> {
        self.labels.get(id).cloned().ok_or_else(|| Error::Dataset(format!("no labels stored for `{id}`")))
    }
}

/// Worst-case flags: a row is flagged when Dice falls below `dice_below` or
/// the Hausdorff distance exceeds `hd_above`.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub dice_below: f64,
    pub hd_above: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { dice_below: 0.88, hd_above: 6.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub class: u8,
    pub dice: f64,
    /// `None` when either mask is empty.
    pub hd_mm: Option<f64>,
    /// `None` when the reference is empty.
    pub rvd: Option<f64>,
    pub holes: usize,
    pub components: usize,
}

impl MetricRow {
    /// Holes plus components beyond the first.
    pub fn violations(&self) -> usize {
        self.holes + self.components.saturating_sub(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: u8,
    pub n: usize,
    pub dice: (f64, f64),
    pub hd_n: usize,
    pub hd_mm: (f64, f64),
    pub rvd_n: usize,
    pub rvd: (f64, f64),
    pub violations: usize,
    pub flagged: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    pub thresholds: Option<Thresholds>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Format(format!("bad number `{s}`")))
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Format(format!("bad {what} `{s}`")))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

const ROW_HEADER: [&str; 7] = ["id", "class", "dice", "hd_mm", "rvd", "holes", "components"];

impl MetricsReport {
    pub fn classes(&self) -> Vec<u8> {
        let mut c: Vec<u8> = self.rows.iter().map(|r| r.class).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn is_flagged(&self, row: &MetricRow) -> Option<bool> {
        self.thresholds
            .map(|t| row.dice < t.dice_below || row.hd_mm.is_some_and(|hd| hd > t.hd_above))
    }

    pub fn summary(&self) -> Vec<ClassSummary> {
        self.classes()
            .into_iter()
            .map(|class| {
                let rows: Vec<&MetricRow> = self.rows.iter().filter(|r| r.class == class).collect();
                let dice: Vec<f64> = rows.iter().map(|r| r.dice).collect();
                let hd: Vec<f64> = rows.iter().filter_map(|r| r.hd_mm).collect();
                let rvd: Vec<f64> = rows.iter().filter_map(|r| r.rvd).collect();
                if hd.len() < rows.len() {
                    warn!("class {class}: {} rows without a Hausdorff distance left out of the mean", rows.len() - hd.len());
                }
                ClassSummary {
                    class,
                    n: rows.len(),
                    dice: mean_std(&dice),
                    hd_n: hd.len(),
                    hd_mm: mean_std(&hd),
                    rvd_n: rvd.len(),
                    rvd: mean_std(&rvd),
                    violations: rows.iter().map(|r| r.violations()).sum(),
                    flagged: self.thresholds.map(|_| rows.iter().filter(|r| self.is_flagged(r) == Some(true)).count()),
                }
            })
            .collect()
    }

    /// Mean foreground Dice over all rows with class > 0.
    pub fn mean_foreground_dice(&self) -> f64 {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.class > 0).map(|r| r.dice).collect();
        mean_std(&v).0
    }

    /// Mean Hausdorff distance over foreground rows where it is defined.
    pub fn mean_foreground_hd(&self) -> f64 {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.class > 0).filter_map(|r| r.hd_mm).collect();
        mean_std(&v).0
    }

    pub fn total_violations(&self) -> usize {
        self.rows.iter().filter(|r| r.class > 0).map(|r| r.violations()).sum()
    }

    pub fn rows_csv(&self) -> String {
        let mut header: Vec<&str> = ROW_HEADER.to_vec();
        if self.thresholds.is_some() {
            header.extend(["dice_below", "hd_above"]);
        }
        let mut out = header.join(",");
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{:?},{},{},{},{}", r.id, r.class, r.dice, fmt_opt(r.hd_mm), fmt_opt(r.rvd), r.holes, r.components);
            if let Some(t) = self.thresholds {
                let _ = write!(out, ",{},{}", u8::from(r.dice < t.dice_below), u8::from(r.hd_mm.is_some_and(|hd| hd > t.hd_above)));
            }
            out.push('\n');
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("class,n,dice_mean,dice_std,hd_n,hd_mean,hd_std,rvd_n,rvd_mean,rvd_std,violations");
        if self.thresholds.is_some() {
            out.push_str(",flagged");
        }
        out.push('\n');
        for s in self.summary() {
            let _ = write!(
                out,
                "{},{},{:?},{:?},{},{:?},{:?},{},{:?},{:?},{}",
                s.class, s.n, s.dice.0, s.dice.1, s.hd_n, s.hd_mm.0, s.hd_mm.1, s.rvd_n, s.rvd.0, s.rvd.1, s.violations
            );
            if let Some(f) = s.flagged {
                let _ = write!(out, ",{f}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses the per-sample CSV. Threshold columns, if present, are ignored.
    pub fn parse_rows(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let header = reader.headers().map_err(csv_err)?.clone();
        if header.len() < ROW_HEADER.len() || header.iter().zip(ROW_HEADER).any(|(a, b)| a != b) {
            return Err(Error::Format(format!("unexpected report header `{}`", header.iter().collect::<Vec<_>>().join(","))));
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let rec = record.map_err(csv_err)?;
            rows.push(MetricRow {
                id: rec[0].to_string(),
                class: parse_field(&rec[1], "class")?,
                dice: parse_field(&rec[2], "dice")?,
                hd_mm: parse_opt(&rec[3])?,
                rvd: parse_opt(&rec[4])?,
                holes: parse_field(&rec[5], "hole count")?,
                components: parse_field(&rec[6], "component count")?,
            });
        }
        Ok(Self { rows, thresholds: None })
    }

    /// Checks that the summary written for `self` matches one recomputed from
    /// the parsed text of its rows.
    pub fn verify_summary(&self) -> Result<()> {
        let reparsed = Self::parse_rows(&self.rows_csv())?;
        for (a, b) in self.summary().iter().zip(reparsed.summary()) {
            let pairs = [a.dice, a.hd_mm, a.rvd].into_iter().zip([b.dice, b.hd_mm, b.rvd]);
            for ((ma, sa), (mb, sb)) in pairs {
                let bad = |x: f64, y: f64| !((x.is_nan() && y.is_nan()) || (x - y).abs() <= RECOMPUTE_TOLERANCE);
                if bad(ma, mb) || bad(sa, sb) {
                    return Err(Error::Format(format!("class {} summary is not recomputable from its rows", a.class)));
                }
            }
        }
        Ok(())
    }

    /// Writes `path` (rows) and a sibling `<stem>_summary.csv`.
    pub fn write(&self, path: &Path) -> Result<std::path::PathBuf> {
        self.verify_summary()?;
        std::fs::write(path, self.rows_csv())?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
        let summary = path.with_file_name(format!("{stem}_summary.csv"));
        std::fs::write(&summary, self.summary_csv())?;
        Ok(summary)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse_rows(&std::fs::read_to_string(path)?)
    }
}

/// Metrics of one predicted label grid against its reference, one row per class.
pub fn score_labels(id: &str, pred: &[u8], reference: &[u8], height: usize, width: usize, n_classes: usize, spacing: [f64; 2]) -> Result<Vec<MetricRow>> {
    (0..n_classes as u8)
        .map(|class| {
            let sp = [1.0, spacing[0], spacing[1]];
            let p = BinaryMask::from_labels(pred, height, width, class)?.with_spacing(sp)?;
            let r = BinaryMask::from_labels(reference, height, width, class)?.with_spacing(sp)?;
            let topo = mask_topology(&p);
            Ok(MetricRow {
                id: id.to_string(),
                class,
                dice: dice_coefficient(&p, &r)?,
                hd_mm: hausdorff_distance(&p, &r)?,
                rvd: if r.is_empty() { None } else { Some(relative_volume_difference(&p, &r)?) },
                holes: topo.holes,
                components: topo.components,
            })
        })
        .collect()
}

/// Segments every sample and scores all classes, parallel across samples.
pub fn evaluate_dataset(segmenter: &dyn Segmenter, data: &Dataset, spacing: [f64; 2]) -> Result<MetricsReport> {
    let per_sample: Vec<Vec<MetricRow>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let pred = segmenter.segment(&data.ids[i], &data.images[i])?;
            score_labels(&data.ids[i], &pred, &data.labels[i], data.height, data.width, data.n_classes, spacing)
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport { rows: per_sample.into_iter().flatten().collect(), thresholds: None })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    Dice,
    Hausdorff,
    Rvd,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Dice, Metric::Hausdorff, Metric::Rvd];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dice => "dice",
            Metric::Hausdorff => "hd_mm",
            Metric::Rvd => "rvd",
        }
    }

    pub fn of(self, row: &MetricRow) -> Option<f64> {
        match self {
            Metric::Dice => Some(row.dice),
            Metric::Hausdorff => row.hd_mm,
            Metric::Rvd => row.rvd,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub class: u8,
    pub metric: Metric,
    pub n: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub outcome: WilcoxonOutcome,
}

impl Comparison {
    pub fn mean_difference(&self) -> f64 {
        self.mean_a - self.mean_b
    }

    pub fn significant(&self) -> bool {
        self.outcome.is_significant(SIGNIFICANCE)
    }
}

fn keyed(report: &MetricsReport) -> Result<BTreeMap<(String, u8), &MetricRow>> {
    let mut map = BTreeMap::new();
    for r in &report.rows {
        if map.insert((r.id.clone(), r.class), r).is_some() {
            return Err(Error::Dataset(format!("duplicate row for sample `{}` class {}", r.id, r.class)));
        }
    }
    Ok(map)
}

/// Paired Wilcoxon test per metric and class. Both reports must cover the
/// same (id, class) pairs. Pairs where either value is undefined are skipped.
pub fn compare_reports(a: &MetricsReport, b: &MetricsReport, metrics: &[Metric]) -> Result<Vec<Comparison>> {
    let ka = keyed(a)?;
    let kb = keyed(b)?;
    if let Some(k) = ka.keys().find(|k| !kb.contains_key(*k)).or_else(|| kb.keys().find(|k| !ka.contains_key(*k))) {
        return Err(Error::Dataset(format!("sample `{}` class {} is missing from one report", k.0, k.1)));
    }
    let mut out = Vec::new();
    for class in a.classes() {
        for &metric in metrics {
            let (xs, ys): (Vec<f64>, Vec<f64>) = ka
                .iter()
                .filter(|(k, _)| k.1 == class)
                .filter_map(|(k, ra)| Some((metric.of(ra)?, metric.of(kb[k])?)))
                .unzip();
            let outcome = if xs.is_empty() { WilcoxonOutcome::InsufficientData { nonzero: 0 } } else { wilcoxon_signed_rank(&xs, &ys)? };
            out.push(Comparison { class, metric, n: xs.len(), mean_a: mean_std(&xs).0, mean_b: mean_std(&ys).0, outcome });
        }
    }
    Ok(out)
}

/// Identical samples (every difference zero) are reported with p = 1.
fn p_and_note(outcome: &WilcoxonOutcome) -> (String, String) {
    match outcome {
        WilcoxonOutcome::Test { p_value, exact, .. } => (format!("{p_value:?}"), if *exact { "exact" } else { "normal" }.into()),
        WilcoxonOutcome::InsufficientData { nonzero: 0 } => ("1.0".into(), "all differences zero".into()),
        WilcoxonOutcome::InsufficientData { nonzero } => (String::new(), format!("insufficient data ({nonzero} nonzero differences)")),
    }
}

pub fn comparison_csv(rows: &[Comparison]) -> String {
    let mut out = String::from("class,metric,n,mean_a,mean_b,mean_diff,statistic,p_value,significant,note\n");
    for c in rows {
        let stat = match &c.outcome {
            WilcoxonOutcome::Test { statistic, .. } => format!("{statistic:?}"),
            WilcoxonOutcome::InsufficientData { .. } => String::new(),
        };
        let (p, note) = p_and_note(&c.outcome);
        let _ = writeln!(
            out,
            "{},{},{},{:?},{:?},{:?},{stat},{p},{},{note}",
            c.class,
            c.metric.name(),
            c.n,
            c.mean_a,
            c.mean_b,
            c.mean_difference(),
            u8::from(c.significant())
        );
    }
    out
}

/// One evaluated (variant, seed) run of an ablation.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub report: MetricsReport,
}

/// Pools a variant's runs into one report with ids prefixed by seed, so
/// variants pair up sample by sample and seed by seed.
pub fn pooled(runs: &[AblationRun], variant: &str) -> MetricsReport {
    let rows = runs
        .iter()
        .filter(|r| r.variant == variant)
        .flat_map(|r| r.report.rows.iter().map(move |row| MetricRow { id: format!("s{}/{}", r.seed, row.id), ..row.clone() }))
        .collect();
    MetricsReport { rows, thresholds: None }
}

/// Side-by-side per-variant means followed by pairwise Wilcoxon p-values on
/// Dice and Hausdorff distance.
pub fn ablation_tables(runs: &[AblationRun], variants: &[String]) -> Result<(String, String)> {
    let mut table = String::from("variant,seed,class,dice_mean,dice_std,hd_mean,hd_std,rvd_mean,rvd_std,violations\n");
    for v in variants {
        let mut entries: Vec<(String, MetricsReport)> =
            runs.iter().filter(|r| &r.variant == v).map(|r| (r.seed.to_string(), r.report.clone())).collect();
        entries.push(("all".into(), pooled(runs, v)));
        for (seed, report) in entries {
            for s in report.summary() {
                let _ = writeln!(
                    table,
                    "{v},{seed},{},{:?},{:?},{:?},{:?},{:?},{:?},{}",
                    s.class, s.dice.0, s.dice.1, s.hd_mm.0, s.hd_mm.1, s.rvd.0, s.rvd.1, s.violations
                );
            }
        }
    }
    let mut tests = String::from("variant_a,variant_b,class,metric,n,mean_diff,p_value,significant,note\n");
    for (i, a) in variants.iter().enumerate() {
        for b in &variants[i + 1..] {
            for c in compare_reports(&pooled(runs, a), &pooled(runs, b), &[Metric::Dice, Metric::Hausdorff])? {
                let (p, note) = p_and_note(&c.outcome);
                let _ = writeln!(
                    tests,
                    "{a},{b},{},{},{},{:?},{p},{},{note}",
                    c.class,
                    c.metric.name(),
                    c.n,
                    c.mean_difference(),
                    u8::from(c.significant())
                );
            }
        }
    }
    Ok((table, tests))
}
