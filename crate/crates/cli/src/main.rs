mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use lfbnet::arch::LfbNet;
use lfbnet::data::{generate, write_dataset, Dataset, DatasetManifest, PhantomSpec, Split};
use lfbnet::experiment::Variant;
use lfbnet::report::{
    ablation_tables, compare_reports, comparison_csv, evaluate_dataset, AblationRun, LookupSegmenter, Metric,
    MetricsReport, ModelSegmenter, Segmenter, Thresholds,
};
use lfbnet::trainer::{CheckpointBundle, TrainOutcome};

use config::ExperimentConfig;

const THREADS_ENV: &str = "LFBNET_THREADS";

#[derive(Parser)]
#[command(name = "lfbnet", version, about = "Segmentation with a latent-space feedback loop")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset and its manifest.
    GenData(GenDataArgs),
    /// Train one experiment; writes the best checkpoint and the loss history.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Train and evaluate several variants over several seeds.
    Ablate(AblateArgs),
    /// Paired Wilcoxon tests between two evaluation reports.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Phantom spec (TOML); defaults are used for missing keys.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.7,0.2,0.1", value_parser = parse_split)]
    split: [f64; 3],
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split_name)]
    split: Split,
    /// Feedback iterations; defaults to the checkpoint's setting.
    #[arg(long)]
    iterations: Option<usize>,
    /// Report path; defaults to `eval_<split>_it<k>.csv` beside the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pixel spacing in mm (rows, columns).
    #[arg(long, default_value = "1,1", value_parser = parse_pair)]
    spacing: [f64; 2],
    /// Adds worst-case flag columns: Dice below the first value or HD above the second.
    #[arg(long, num_args = 0..=1, default_missing_value = "0.88,6.5", value_parser = parse_pair)]
    thresholds: Option<[f64; 2]>,
    /// Score the ground truth against itself instead of running a model.
    #[arg(long, hide = true)]
    oracle: bool,
    /// Number of classes when running with --oracle.
    #[arg(long, hide = true, default_value_t = 4)]
    classes: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "fs,fs_star,lfb", value_delimiter = ',')]
    variants: Vec<String>,
    #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct CompareArgs {
    /// Exactly two per-sample reports.
    #[arg(long = "report", num_args = 1, required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Errors that should exit with the usage code.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn parse_floats(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',').map(|p| p.trim().parse::<f64>().map_err(|_| format!("`{p}` is not a number"))).collect()
}

fn parse_split(s: &str) -> std::result::Result<[f64; 3], String> {
    let v = parse_floats(s)?;
    let [a, b, c] = v[..] else {
        return Err(format!("expected three fractions, got {}", v.len()));
    };
    if v.iter().any(|&f| !(0.0..=1.0).contains(&f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(format!("fractions {a}, {b}, {c} must lie in [0, 1] and sum to 1"));
    }
    Ok([a, b, c])
}

fn parse_pair(s: &str) -> std::result::Result<[f64; 2], String> {
    match parse_floats(s)?[..] {
        [a, b] => Ok([a, b]),
        _ => Err("expected two comma-separated numbers".into()),
    }
}

fn parse_split_name(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: lfbnet::Error| e.to_string())
}

fn read_spec(path: &Path) -> Result<PhantomSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading spec {}", path.display()))?;
    let spec: PhantomSpec = toml::from_str(&text).with_context(|| format!("parsing spec {}", path.display()))?;
    spec.validate()?;
    Ok(spec)
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let spec = read_spec(&args.spec)?;
    if args.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let samples = generate(&spec, args.n)?;
    let manifest = write_dataset(&args.out, &samples, args.split, spec.seed)
        .with_context(|| format!("writing dataset to {}", args.out.display()))?;
    println!("spec_hash {}", spec.hash());
    for split in Split::ALL {
        println!("{split} {}", manifest.count(split));
    }
    Ok(())
}

/// Resolves the experiment's data, generating it under `out_dir/data` when
/// the config carries a phantom spec. Returns the manifest path.
fn prepare_data(cfg: &ExperimentConfig) -> Result<PathBuf> {
    if let Some(path) = &cfg.dataset {
        if !path.exists() {
            bail!("dataset manifest {} does not exist", path.display());
        }
        return Ok(path.clone());
    }
    let spec = cfg.phantom.as_ref().expect("config validated");
    let dir = cfg.out_dir.join("data");
    let manifest_path = dir.join("manifest.txt");
    if let Ok(existing) = DatasetManifest::read(&manifest_path) {
        if existing.spec_hash == spec.hash() && existing.entries.len() == cfg.samples {
            return Ok(manifest_path);
        }
    }
    let samples = generate(spec, cfg.samples)?;
    write_dataset(&dir, &samples, cfg.split, spec.seed)?;
    Ok(manifest_path)
}

fn history_csv(outcome: &TrainOutcome) -> String {
    let mut out = String::from("cycle,step,train_loss,val_loss,val_dice\n");
    for r in &outcome.state.history {
        let _ = writeln!(out, "{},{},{:?},{:?},{:?}", r.cycle, r.step as u8, r.train_loss, r.val_loss, r.val_dice);
    }
    out
}

struct TrainedRun {
    checkpoint: PathBuf,
    outcome: TrainOutcome,
}

fn train_variant(cfg: &ExperimentConfig, variant: Variant, seed: Option<u64>, manifest: &Path, dir: &Path) -> Result<TrainedRun> {
    let n_classes = cfg.model.n_classes;
    let train_set = Dataset::load(manifest, Split::Train, n_classes)?;
    let val_set = Dataset::load(manifest, Split::Val, n_classes)?;
    if [train_set.height, train_set.width] != cfg.model.input_size {
        bail!(
            "dataset images are {}x{} but the model expects {}x{}",
            train_set.height,
            train_set.width,
            cfg.model.input_size[0],
            cfg.model.input_size[1]
        );
    }
    let mut train = cfg.train.clone();
    let mut init_seed = cfg.init_seed;
    if let Some(s) = seed {
        train.seed = s;
        init_seed = s;
    }
    info!("training {variant} (seed {}) on {} samples", train.seed, train_set.len());
    let (_, outcome) = variant.train(&cfg.model, &train, init_seed, &train_set, &val_set)?;
    std::fs::create_dir_all(dir)?;
    let checkpoint = dir.join("checkpoint.lfbc");
    outcome.best.save(&checkpoint)?;
    std::fs::write(dir.join("history.csv"), history_csv(&outcome))?;
    Ok(TrainedRun { checkpoint, outcome })
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let manifest = prepare_data(&cfg)?;
    let run = train_variant(&cfg, cfg.variant, None, &manifest, &cfg.out_dir)?;
    println!("checkpoint {}", run.checkpoint.display());
    println!("history {}", cfg.out_dir.join("history.csv").display());
    println!(
        "cycles {} best_cycle {} best_val_loss {:?}",
        run.outcome.state.cycle, run.outcome.best.meta.cycle, run.outcome.state.best_val_loss
    );
    Ok(())
}

fn checkpoint_iterations(bundle: &CheckpointBundle) -> usize {
    if bundle.meta.model.feedback {
        bundle.meta.train.test_feedback_iterations
    } else {
        0
    }
}

fn evaluate_checkpoint(bundle: &CheckpointBundle, data: &Dataset, iterations: usize, spacing: [f64; 2]) -> Result<MetricsReport> {
    let net: LfbNet = bundle.restore()?;
    let seg = ModelSegmenter { net: &net, stats: bundle.meta.stats, iterations };
    Ok(evaluate_dataset(&seg, data, spacing)?)
}

fn eval(args: &EvalArgs) -> Result<()> {
    let (mut report, out) = if args.oracle {
        let data = Dataset::load(&args.data, args.split, args.classes)?;
        let seg: &dyn Segmenter = &LookupSegmenter::ground_truth(&data);
        let out = args.out.clone().unwrap_or_else(|| PathBuf::from(format!("eval_{}_oracle.csv", args.split)));
        (evaluate_dataset(seg, &data, args.spacing)?, out)
    } else {
        let path = args.checkpoint.as_ref().expect("required by clap");
        let bundle = CheckpointBundle::load(path).with_context(|| format!("loading {}", path.display()))?;
        let data = Dataset::load(&args.data, args.split, bundle.meta.model.n_classes)?;
        let iterations = args.iterations.unwrap_or_else(|| checkpoint_iterations(&bundle));
        let out = args.out.clone().unwrap_or_else(|| {
            path.with_file_name(format!("eval_{}_it{iterations}.csv", args.split))
        });
        (evaluate_checkpoint(&bundle, &data, iterations, args.spacing)?, out)
    };
    report.thresholds = args.thresholds.map(|[d, h]| Thresholds { dice_below: d, hd_above: h });
    let summary = report.write(&out)?;
    print!("{}", report.summary_csv());
    println!("report {}", out.display());
    println!("summary {}", summary.display());
    Ok(())
}

fn ablate(args: &AblateArgs) -> Result<()> {
    let variants = args
        .variants
        .iter()
        .map(|v| v.parse::<Variant>().map_err(|e| usage(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    if variants.len() < 2 {
        return Err(usage("ablation needs at least two variants"));
    }
    if args.seeds.is_empty() {
        return Err(usage("ablation needs at least one seed"));
    }
    let cfg = ExperimentConfig::load(&args.config)?;
    let manifest = prepare_data(&cfg)?;
    let test_set = Dataset::load(&manifest, Split::Test, cfg.model.n_classes)?;
    let root = cfg.out_dir.join("ablation");
    let mut runs = Vec::new();
    for &seed in &args.seeds {
        let mut done: Vec<Variant> = Vec::new();
        for &variant in &variants {
            let dir = root.join(format!("{variant}_s{seed}"));
            if done.contains(&variant) {
                continue;
            }
            let run = train_variant(&cfg, variant, Some(seed), &manifest, &dir)?;
            let iterations = checkpoint_iterations(&run.outcome.best);
            let report = evaluate_checkpoint(&run.outcome.best, &test_set, iterations, [1.0, 1.0])?;
            report.write(&dir.join("eval_test.csv"))?;
            done.push(variant);
            runs.push(AblationRun { variant: variant.to_string(), seed, report });
        }
    }
    let names: Vec<String> = variants.iter().map(|v| v.to_string()).collect();
    let (table, tests) = ablation_tables(&runs, &names)?;
    std::fs::write(root.join("ablation_table.csv"), &table)?;
    std::fs::write(root.join("ablation_tests.csv"), &tests)?;
    print!("{table}\n{tests}");
    println!("table {}", root.join("ablation_table.csv").display());
    Ok(())
}

fn compare(args: &CompareArgs) -> Result<()> {
    let [a, b] = &args.reports[..] else {
        return Err(usage(format!("compare takes exactly two --report files, got {}", args.reports.len())));
    };
    let ra = MetricsReport::read(a).with_context(|| format!("reading {}", a.display()))?;
    let rb = MetricsReport::read(b).with_context(|| format!("reading {}", b.display()))?;
    let rows = compare_reports(&ra, &rb, &Metric::ALL)?;
    let text = comparison_csv(&rows);
    if let Some(out) = &args.out {
        std::fs::write(out, &text)?;
    }
    print!("{text}");
    let flagged = rows.iter().filter(|c| c.significant()).count();
    println!("significant {flagged} of {}", rows.len());
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().map_err(|_| usage(format!("{THREADS_ENV}={v} is not a thread count")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Compare(a) => compare(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<Usage>() { 2 } else { 1 })
        }
    }
}
