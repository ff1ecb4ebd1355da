//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. `LFBNET_ACCEPTANCE=1,4,7` runs a subset.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::oracles::{blob_mask, enumerate_p, oracle_hausdorff, oracle_topology, random_mask};
use common::toy::{ctx, toy_data, toy_net};
use common::{finite_difference_check, parameter_gradient_check, random_in, random_tensor, rng};
use lfbnet::arch::{reference_unet_parameter_count, Group, LfbNet, ModelConfig};
use lfbnet::data::{generate, split_indices, Dataset, Degradation, PhantomSpec};
use lfbnet::engine::{kernels, Adam, AdamConfig, Tape, Var};
use lfbnet::experiment::Variant;
use lfbnet::loss::{cross_entropy_loss, dice_loss, encode_target, total_loss, ClassWeights};
use lfbnet::metrics::{
    average_ranks, dice_coefficient, hausdorff_distance, mask_topology, relative_volume_difference, wilcoxon_signed_rank,
};
use lfbnet::report::{evaluate_dataset, MetricsReport, ModelSegmenter};
use lfbnet::trainer::{
    infer, objective, step1_train_forward, step2_train_feedback, step3_inputs, step3_loss, step3_train_decoder,
    CheckpointBundle, TrainConfig, TrainOutcome,
};
use lfbnet::Tensor4;
use rand::Rng;

const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const DICE_LOSS_PERFECT: f64 = 1e-6;
const CE_PERFECT: f64 = 1e-11;
const CE_UNIFORM: f64 = 1e-12;
const HD_TOLERANCE: f64 = 1e-9;
const P_TOLERANCE: f64 = 1e-12;
const PARAM_RANGE: (usize, usize) = (6_800_000, 10_200_000);
const TOY_DICE: f64 = 0.90;
const TOY_CYCLES: usize = 30;
const TOY_BUDGET: Duration = Duration::from_secs(30 * 60);
const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];
const ABLATION_CYCLES: usize = 8;
const ABLATION_SAMPLES: usize = 150;
const MAJORITY: usize = 2;
const INFER_BUDGET: Duration = Duration::from_millis(250);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn bits(t: &Tensor4) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

// 1 ---------------------------------------------------------------------------

fn op_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(7000 + seed);
    let x = random_tensor([2, 3, 4, 4], &mut r);
    let y = random_tensor([2, 3, 4, 4], &mut r);
    let k = random_tensor([2, 3, 3, 3], &mut r);
    let kt = random_tensor([3, 2, 2, 2], &mut r);
    let b = random_tensor([2, 1, 1, 1], &mut r);
    let gamma = random_in([3, 1, 1, 1], 0.5, 1.5, &mut r);
    let beta = random_tensor([3, 1, 1, 1], &mut r);
    let gate = random_tensor([2, 3, 1, 1], &mut r);
    let se_x = random_tensor([2, 8, 3, 3], &mut r);
    let w1 = random_tensor([2, 8, 1, 1], &mut r);
    let w2 = random_tensor([8, 2, 1, 1], &mut r);
    let probs = kernels::softmax_channels(&random_tensor([2, 3, 4, 4], &mut r)).unwrap();
    let labels: Vec<u8> = (0..32).map(|_| r.gen_range(0..3)).collect();
    let target = encode_target(&[&labels[..16], &labels[16..]], 4, 4, 3).unwrap();
    let bin_p = random_in([2, 1, 4, 4], 0.05, 0.95, &mut r);
    let bin_labels: Vec<u8> = labels.iter().map(|&v| u8::from(v > 0)).collect();
    let bin_t = encode_target(&[&bin_labels[..16], &bin_labels[16..]], 4, 4, 1).unwrap();
    let weights = ClassWeights::new(vec![0.5, 1.0, 2.0]).unwrap();
    let (t1, t2) = (target.clone(), target);
    vec![
        ("conv2d", finite_difference_check(|t, v| t.conv2d(&v[0], &v[1], Some(&v[2]), 1, 1), &[x.clone(), k.clone(), b.clone()], seed, 40)),
        ("conv2d/s2", finite_difference_check(|t, v| t.conv2d(&v[0], &v[1], None, 2, 1), &[x.clone(), k], seed, 40)),
        ("conv_transpose2d", finite_difference_check(|t, v| t.conv_transpose2d(&v[0], &v[1], Some(&v[2]), 2), &[x.clone(), kt, b], seed, 40)),
        ("maxpool2d", finite_difference_check(|t, v| t.maxpool2d(&v[0]), &[x.clone()], seed, 40)),
        ("batchnorm_train", finite_difference_check(|t, v| Ok(t.batchnorm_train(&v[0], &v[1], &v[2])?.0), &[x.clone(), gamma.clone(), beta.clone()], seed, 40)),
        ("batchnorm_eval", finite_difference_check(|t, v| t.batchnorm_eval(&v[0], &v[1], &v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0]), &[x.clone(), gamma, beta], seed, 40)),
        ("elu", finite_difference_check(|t, v| t.elu(&v[0]), &[x.clone()], seed, 40)),
        ("sigmoid", finite_difference_check(|t, v| t.sigmoid(&v[0]), &[x.clone()], seed, 40)),
        ("softmax", finite_difference_check(|t, v| t.softmax_channels(&v[0]), &[x.clone()], seed, 40)),
        ("global_avg_pool", finite_difference_check(|t, v| t.global_avg_pool(&v[0]), &[x.clone()], seed, 40)),
        ("channel_scale", finite_difference_check(|t, v| t.channel_scale(&v[0], &v[1]), &[x.clone(), gate], seed, 40)),
        ("se_block", finite_difference_check(|t, v| t.se_block(&v[0], &v[1], &v[2]), &[se_x, w1, w2], seed, 40)),
        ("concat", finite_difference_check(|t, v| t.concat_channels(&v[0], &v[1]), &[x.clone(), y.clone()], seed, 40)),
        ("add", finite_difference_check(|t, v| t.add(&v[0], &v[1]), &[x.clone(), y.clone()], seed, 40)),
        ("mul", finite_difference_check(|t, v| t.mul(&v[0], &v[1]), &[x, y], seed, 40)),
        ("cross_entropy", finite_difference_check(move |tp, v| tp.cross_entropy(&v[0], &t1), &[probs.clone()], seed, 40)),
        ("dice_loss", finite_difference_check(move |tp, v| tp.dice_loss(&v[0], &t2, &weights), &[probs], seed, 40)),
        ("binary_cross_entropy", finite_difference_check(move |tp, v| tp.cross_entropy(&v[0], &bin_t), &[bin_p], seed, 40)),
    ]
}

fn composite_gradient_errors(seed: u64) -> [(&'static str, f64); 2] {
    let data = toy_data(500 + seed, 2);
    let mut net = toy_net(seed);
    let w = ClassWeights::uniform(4);
    let (x, t) = data.batch(&[0, 1], 4).unwrap();

    net.set_frozen("all", true).unwrap();
    net.set_frozen("S_e", false).unwrap();
    net.set_frozen("S_d", false).unwrap();
    let step1 = |net: &LfbNet, tape: &mut Tape| {
        let xv = tape.constant(x.clone());
        let (y, _) = net.forward_pass(tape, &xv, None)?;
        objective(tape, &y, &t, &w)
    };
    let e1 = parameter_gradient_check(&mut net, "S_", step1, seed, 30);

    net.set_frozen("all", true).unwrap();
    net.set_frozen("S_d", false).unwrap();
    let inputs = step3_inputs(&net, x.clone()).unwrap();
    let step3 = |net: &LfbNet, tape: &mut Tape| step3_loss(net, tape, &inputs, &t, &w);
    let e3 = parameter_gradient_check(&mut net, "S_d", step3, seed, 30);
    [("step1 loss", e1), ("step3 loss", e3)]
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut worst = ("", 0.0f64);
    let mut checks = 0;
    for seed in 0..10 {
        for (name, err) in op_gradient_errors(seed).into_iter().chain(composite_gradient_errors(seed)) {
            checks += 1;
            if err > worst.1 {
                worst = (name, err);
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst.1 <= GRAD_TOLERANCE && elapsed < GRAD_BUDGET,
        format!("{checks} checks over 10 seeds, worst relative error {:.2e} ({}), {:.1}s", worst.1, worst.0, elapsed.as_secs_f64()),
    )
}

// 2 ---------------------------------------------------------------------------

fn criterion_2() -> Verdict {
    let mut r = rng(2);
    let labels: Vec<Vec<u8>> = (0..2).map(|_| (0..64).map(|_| r.gen_range(0..4)).collect()).collect();
    let refs: Vec<&[u8]> = labels.iter().map(|l| &l[..]).collect();
    let target = encode_target(&refs, 8, 8, 4).unwrap();
    let dice_perfect = dice_loss(&target, &target, &ClassWeights::uniform(4)).unwrap();
    let ce_perfect = cross_entropy_loss(&target, &target).unwrap();
    let mut worst_uniform: f64 = 0.0;
    for c in [2usize, 3, 4, 5] {
        let l: Vec<u8> = (0..64).map(|i| (i % c) as u8).collect();
        let t = encode_target(&[&l], 8, 8, c).unwrap();
        let u = Tensor4::filled([1, c, 8, 8], 1.0 / c as f64);
        worst_uniform = worst_uniform.max((cross_entropy_loss(&u, &t).unwrap() - (c as f64).ln()).abs());
    }
    let mut exact_mean = true;
    for _ in 0..1000 {
        let (a, b) = (r.gen_range(0.0..10.0), r.gen_range(0.0..10.0));
        let mean = (a + b) / 2.0;
        exact_mean &= total_loss(a, b).to_bits() == mean.to_bits();
    }
    exact_mean &= total_loss(0.4, 0.6) == 0.5 && total_loss(0.0, 0.0) == 0.0;
    verdict(
        dice_perfect <= DICE_LOSS_PERFECT && ce_perfect <= CE_PERFECT && worst_uniform <= CE_UNIFORM && exact_mean,
        format!(
            "perfect dice loss {dice_perfect:.1e}, perfect CE {ce_perfect:.1e}, |CE_uniform - ln c| {worst_uniform:.1e}, exact mean {exact_mean}"
        ),
    )
}

// 3 ---------------------------------------------------------------------------

fn criterion_3() -> Verdict {
    let mut r = rng(3);
    let mut mismatches = Vec::new();
    let mut worst_hd: f64 = 0.0;
    for i in 0..200 {
        let h = r.gen_range(1..=32);
        let w = r.gen_range(1..=32);
        let (a, b) = if i % 2 == 0 {
            let d = r.gen_range(0.05..0.6);
            (random_mask(&mut r, h, w, d), random_mask(&mut r, h, w, d))
        } else {
            (blob_mask(&mut r, h, w), blob_mask(&mut r, h, w))
        };
        let inter = a.data().iter().zip(b.data()).filter(|(x, y)| **x && **y).count();
        let dice = if a.count() + b.count() == 0 { 1.0 } else { 2.0 * inter as f64 / (a.count() + b.count()) as f64 };
        if dice_coefficient(&a, &b).unwrap() != dice {
            mismatches.push(format!("dice #{i}"));
        }
        match (hausdorff_distance(&a, &b).unwrap(), oracle_hausdorff(&a, &b)) {
            (Some(x), Some(y)) => worst_hd = worst_hd.max((x - y).abs()),
            (x, y) if x != y => mismatches.push(format!("hd #{i}")),
            _ => {}
        }
        if !b.is_empty() {
            let rvd = (a.count() as f64 - b.count() as f64).abs() / b.count() as f64;
            if relative_volume_difference(&a, &b).unwrap() != rvd {
                mismatches.push(format!("rvd #{i}"));
            }
        }
        if mask_topology(&a) != oracle_topology(&a) {
            mismatches.push(format!("topology #{i}"));
        }
    }
    let mut worst_p: f64 = 0.0;
    for _ in 0..200 {
        let n = r.gen_range(5..=12);
        let diffs: Vec<f64> = (0..n).map(|_| r.gen_range(1..6) as f64 * if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
        let ranks = average_ranks(&abs);
        let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
        let got = wilcoxon_signed_rank(&diffs, &vec![0.0; n]).unwrap().p_value().unwrap();
        worst_p = worst_p.max((got - enumerate_p(&ranks, w_plus)).abs());
    }
    verdict(
        mismatches.is_empty() && worst_hd <= HD_TOLERANCE && worst_p <= P_TOLERANCE,
        format!(
            "200 masks: {} mismatches, worst HD deviation {worst_hd:.1e}; 200 Wilcoxon cases: worst p deviation {worst_p:.1e}",
            mismatches.len()
        ),
    )
}

// 4 ---------------------------------------------------------------------------

fn changed(before: &[[u8; 32]], net: &LfbNet) -> Vec<Group> {
    Group::ALL.iter().zip(before).filter(|(g, d)| net.group_digest(**g).unwrap() != **d).map(|(g, _)| *g).collect()
}

fn criterion_4() -> Verdict {
    let data = toy_data(4, 20);
    let mut net = toy_net(4);
    let order: Vec<usize> = (0..20).collect();
    let w = ClassWeights::uniform(4);
    let c = ctx(&data, &order, &w);
    let digests = |net: &LfbNet| Group::ALL.map(|g| net.group_digest(g).unwrap());
    let mut scopes = Vec::new();
    type StepFn = fn(&mut LfbNet, &mut Adam, &lfbnet::trainer::StepContext) -> lfbnet::Result<f64>;
    let steps: [(&str, StepFn, Vec<Group>); 3] = [
        ("step1", step1_train_forward, vec![Group::ForwardEncoder, Group::ForwardDecoder]),
        ("step2", step2_train_feedback, vec![Group::FeedbackEncoder, Group::FeedbackDecoder]),
        ("step3", step3_train_decoder, vec![Group::ForwardDecoder]),
    ];
    let mut ok = true;
    for (name, step, expected) in steps {
        let before = digests(&net);
        let mut opt = Adam::new(AdamConfig::default(), net.store());
        step(&mut net, &mut opt, &c).unwrap();
        let got = changed(&before, &net);
        ok &= got == expected;
        scopes.push(format!("{name} changed {}", got.iter().map(|g| g.name()).collect::<Vec<_>>().join("+")));
    }
    verdict(ok, scopes.join(", "))
}

// 5 ---------------------------------------------------------------------------

fn criterion_5() -> Verdict {
    let data = toy_data(5, 20);
    let mut net = toy_net(5);
    let order: Vec<usize> = (0..20).collect();
    let w = ClassWeights::uniform(4);
    let c = ctx(&data, &order, &w);
    let mut opt_s = Adam::new(AdamConfig::default(), net.store());
    let mut opt_f = Adam::new(AdamConfig::default(), net.store());
    step1_train_forward(&mut net, &mut opt_s, &c).unwrap();
    step2_train_feedback(&mut net, &mut opt_f, &c).unwrap();
    step3_train_decoder(&mut net, &mut opt_s, &c).unwrap();
    net.set_frozen("all", false).unwrap();

    let (x, _) = data.batch(&[0, 1, 2], 4).unwrap();
    let calls = net.feedback_decoder_calls();
    let y0 = infer(&net, &x, 0).unwrap();
    let (plain, _) = net.forward_pass(&mut Tape::no_grad(), &Var::constant(x.clone()), None).unwrap();
    let zero_equal = bits(&y0) == bits(plain.value());
    let y1 = infer(&net, &x, 1).unwrap();
    let stats = lfbnet::trainer::NormStats { mean: 0.0, std: 1.0 };
    let _ = evaluate_dataset(&ModelSegmenter { net: &net, stats, iterations: 2 }, &data, [1.0, 1.0]).unwrap();
    let no_fd = net.feedback_decoder_calls() == calls;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.lfbc");
    let bundle = CheckpointBundle::capture(&net, &TrainConfig::default(), stats, 1);
    bundle.save(&path).unwrap();
    let loaded = CheckpointBundle::load(&path).unwrap();
    let restored = loaded.restore().unwrap();
    let stable = bits(&infer(&restored, &x, 1).unwrap()) == bits(&y1) && loaded.to_bytes().unwrap() == std::fs::read(&path).unwrap();
    verdict(
        zero_equal && no_fd && stable,
        format!("iterations=0 bit-equal {zero_equal}, F_d untouched {no_fd}, save/load/infer bit-stable {stable}"),
    )
}

// 6 ---------------------------------------------------------------------------

fn criterion_6() -> Verdict {
    let net = LfbNet::new(ModelConfig::default(), 0).unwrap();
    let train = net.train_parameter_count();
    let test = net.test_parameter_count();
    let fd = net.parameter_count(Group::FeedbackDecoder);
    let unet = reference_unet_parameter_count(1, 4);
    verdict(
        (PARAM_RANGE.0..=PARAM_RANGE.1).contains(&train) && train - test == fd && train < unet,
        format!("train {train}, test {test}, F_d {fd}, reference U-Net {unet}"),
    )
}

// 7 ---------------------------------------------------------------------------

fn split_sets(spec: &PhantomSpec, n: usize, fractions: [f64; 3]) -> [Dataset; 3] {
    let samples = generate(spec, n).unwrap();
    let parts = split_indices(n, fractions, spec.seed).unwrap();
    parts.map(|idx| {
        let picked: Vec<_> = idx.iter().map(|&i| samples[i].clone()).collect();
        let ids = idx.iter().map(|i| format!("{i:05}")).collect();
        Dataset::from_samples_with_ids(&picked, spec.n_classes(), ids).unwrap()
    })
}

/// Desk-scale model used for the learning criteria.
fn toy_scale_model() -> ModelConfig {
    ModelConfig {
        input_size: [64, 64],
        base_channels: 16,
        latent_channels: 64,
        feedback_base_channels: 8,
        latent_repeats: 1,
        ..Default::default()
    }
}

fn criterion_7() -> Verdict {
    let spec = PhantomSpec { seed: 1, ..Default::default() };
    let [train, val, _] = split_sets(&spec, 200, [0.7, 0.2, 0.1]);
    let cfg = TrainConfig { max_cycles: TOY_CYCLES, target_val_dice: Some(TOY_DICE), ..Default::default() };
    let start = Instant::now();
    let (_, out) = Variant::Lfb.train(&toy_scale_model(), &cfg, 0, &train, &val).unwrap();
    let elapsed = start.elapsed();
    let best = out.state.cycles.iter().map(|c| c.val_dice).fold(0.0, f64::max);
    let reached = out.state.cycles.iter().find(|c| c.val_dice >= TOY_DICE).map(|c| c.cycle);
    verdict(
        reached.is_some() && elapsed <= TOY_BUDGET,
        format!(
            "best val Dice {best:.4}, reached {TOY_DICE} at cycle {}, {} cycles run, {:.0}s",
            reached.map_or("-".into(), |c| c.to_string()),
            out.state.cycle,
            elapsed.as_secs_f64()
        ),
    )
}

// 8 and 9 ---------------------------------------------------------------------

struct AblationResult {
    seed: u64,
    reports: Vec<(Variant, MetricsReport)>,
    outcomes: Vec<(Variant, TrainOutcome)>,
}

fn low_contrast_spec() -> PhantomSpec {
    PhantomSpec { seed: 11, degradation: Degradation { contrast: 0.3, noise_sigma: 0.1, ..Default::default() }, ..Default::default() }
}

/// Smaller model for the three-variant, three-seed ablation.
fn ablation_model() -> ModelConfig {
    ModelConfig {
        input_size: [64, 64],
        base_channels: 8,
        latent_channels: 32,
        feedback_base_channels: 4,
        latent_repeats: 1,
        ..Default::default()
    }
}

fn run_ablation() -> Vec<AblationResult> {
    let [train, val, test] = split_sets(&low_contrast_spec(), ABLATION_SAMPLES, [0.6, 0.2, 0.2]);
    ABLATION_SEEDS
        .iter()
        .map(|&seed| {
            let mut reports = Vec::new();
            let mut outcomes = Vec::new();
            for v in Variant::ALL {
                let cfg = TrainConfig { max_cycles: ABLATION_CYCLES, seed, ..Default::default() };
                let (_, out) = v.train(&ablation_model(), &cfg, seed, &train, &val).unwrap();
                let net = out.best.restore().unwrap();
                let iterations = if v == Variant::Lfb { 1 } else { 0 };
                let seg = ModelSegmenter { net: &net, stats: out.stats, iterations };
                reports.push((v, evaluate_dataset(&seg, &test, [1.0, 1.0]).unwrap()));
                outcomes.push((v, out));
            }
            AblationResult { seed, reports, outcomes }
        })
        .collect()
}

fn report_of(r: &AblationResult, v: Variant) -> &MetricsReport {
    &r.reports.iter().find(|(x, _)| *x == v).unwrap().1
}

fn criterion_8(runs: &[AblationResult]) -> Verdict {
    let mut wins = 0;
    let mut lines = Vec::new();
    let (mut viol_lfb, mut viol_fs) = (0, 0);
    for r in runs {
        let [fs, fs_star, lfb] = [Variant::Fs, Variant::FsStar, Variant::Lfb].map(|v| report_of(r, v));
        let dice_ok = lfb.mean_foreground_dice() >= fs.mean_foreground_dice() && lfb.mean_foreground_dice() >= fs_star.mean_foreground_dice();
        let hd_ok = lfb.mean_foreground_hd() <= fs.mean_foreground_hd() && lfb.mean_foreground_hd() <= fs_star.mean_foreground_hd();
        wins += usize::from(dice_ok && hd_ok);
        viol_lfb += lfb.total_violations();
        viol_fs += fs.total_violations();
        lines.push(format!(
            "seed {}: dice fs/fs*/lfb {:.3}/{:.3}/{:.3} hd {:.2}/{:.2}/{:.2}",
            r.seed,
            fs.mean_foreground_dice(),
            fs_star.mean_foreground_dice(),
            lfb.mean_foreground_dice(),
            fs.mean_foreground_hd(),
            fs_star.mean_foreground_hd(),
            lfb.mean_foreground_hd()
        ));
    }
    verdict(
        wins >= MAJORITY && viol_lfb < viol_fs,
        format!("lfb best in {wins}/{} seeds, violations lfb {viol_lfb} vs fs {viol_fs}; {}", runs.len(), lines.join("; ")),
    )
}

fn criterion_9(runs: &[AblationResult]) -> Verdict {
    let mut wins = 0;
    let mut lines = Vec::new();
    for r in runs {
        let history = |v: Variant| &r.outcomes.iter().find(|(x, _)| *x == v).unwrap().1.state.cycles;
        let (lfb, fs) = (history(Variant::Lfb), history(Variant::Fs));
        let common = lfb.len().min(fs.len());
        let (l, f) = (lfb[common - 1].val_loss, fs[common - 1].val_loss);
        wins += usize::from(l <= f);
        lines.push(format!("seed {} cycle {common}: lfb {l:.4} vs step-1-only {f:.4}", r.seed));
    }
    verdict(wins >= MAJORITY, format!("lfb at or below baseline in {wins}/{} seeds; {}", runs.len(), lines.join("; ")))
}

// 10 --------------------------------------------------------------------------

fn criterion_10() -> Verdict {
    let net = LfbNet::new(ModelConfig::default(), 0).unwrap();
    let x = random_tensor([1, 1, 256, 256], &mut rng(10));
    let mut times: Vec<f64> = (0..3)
        .map(|_| {
            let t = Instant::now();
            infer(&net, &x, 1).unwrap();
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let median = times[1];
    verdict(
        median <= INFER_BUDGET.as_secs_f64(),
        format!(
            "median single 256x256 inference with one feedback iteration {:.3}s (budget {:.3}s)",
            median,
            INFER_BUDGET.as_secs_f64()
        ),
    )
}

// -----------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            verdict(false, format!("panicked: {}", msg.unwrap_or_default()))
        }
    }
}

fn main() {
    let selected: Option<Vec<usize>> = std::env::var("LFBNET_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let wanted = |i: usize| selected.as_ref().map_or(true, |s| s.contains(&i));
    let names = [
        "gradient correctness",
        "loss identities",
        "metric oracle equivalence",
        "protocol update scope",
        "inference contract",
        "parameter budget",
        "toy-scale learning",
        "ablation ordering",
        "convergence behaviour",
        "inference throughput",
    ];
    let simple: [fn() -> Verdict; 7] =
        [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7];
    let mut failures = 0;
    let mut emit = |i: usize, v: Verdict| {
        failures += usize::from(!v.pass);
        println!("{} criterion {i} ({}): {}", if v.pass { "PASS" } else { "FAIL" }, names[i - 1], v.detail);
    };
    for (i, f) in simple.iter().enumerate() {
        if wanted(i + 1) {
            emit(i + 1, guarded(f));
        }
    }
    if wanted(8) || wanted(9) {
        match catch_unwind(run_ablation) {
            Ok(runs) => {
                if wanted(8) {
                    emit(8, guarded(|| criterion_8(&runs)));
                }
                if wanted(9) {
                    emit(9, guarded(|| criterion_9(&runs)));
                }
            }
            Err(_) => {
                for i in [8, 9].into_iter().filter(|&i| wanted(i)) {
                    emit(i, verdict(false, "ablation runs panicked"));
                }
            }
        }
    }
    if wanted(10) {
        emit(10, guarded(criterion_10));
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
