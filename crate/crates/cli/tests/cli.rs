use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lfbnet::arch::Group;
use lfbnet::data::{DatasetManifest, Split};
use lfbnet::trainer::CheckpointBundle;

fn lfbnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfbnet")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(&o), stderr(&o));
    stdout(&o)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SPEC: &str = "kind = \"cardiac\"\nimage_size = [64, 64]\nseed = 7\n";

const TINY_MODEL: &str = "
[model]
input_size = [64, 64]
base_channels = 4
latent_channels = 8
feedback_base_channels = 4
conv_repeats = 1
latent_repeats = 1
se_reduction = 2
";

fn experiment(dir: &Path, variant: &str, max_cycles: usize) -> PathBuf {
    let path = dir.join(format!("{variant}.toml"));
    let text = format!(
        "variant = \"{variant}\"\nout_dir = \"run_{variant}\"\nsamples = 100\n\n[phantom]\nimage_size = [64, 64]\nseed = 3\n{TINY_MODEL}\n[train]\nmax_cycles = {max_cycles}\nbatch_size = 10\n"
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn gen(dir: &Path, size: usize) -> PathBuf {
    let spec = dir.join(format!("spec{size}.toml"));
    std::fs::write(&spec, format!("image_size = [{size}, {size}]\nseed = 5\n")).unwrap();
    let out = dir.join(format!("data{size}"));
    ok(lfbnet(&["gen-data", "--spec", s(&spec), "--n", "20", "--out", s(&out)]));
    out.join("manifest.txt")
}

#[test]
fn gen_data_writes_split_manifest_and_stable_hash() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    std::fs::write(&spec, SPEC).unwrap();
    let out = dir.path().join("data");
    let first = ok(lfbnet(&["gen-data", "--spec", s(&spec), "--n", "100", "--out", s(&out), "--split", "0.7,0.2,0.1"]));
    let manifest = DatasetManifest::read(&out.join("manifest.txt")).unwrap();
    assert_eq!([manifest.count(Split::Train), manifest.count(Split::Val), manifest.count(Split::Test)], [70, 20, 10]);
    let again = ok(lfbnet(&["gen-data", "--spec", s(&spec), "--n", "100", "--out", s(&dir.path().join("again"))]));
    let hash = |t: &str| t.lines().find(|l| l.starts_with("spec_hash ")).unwrap().to_string();
    assert_eq!(hash(&first), hash(&again));
    assert_eq!(hash(&first), format!("spec_hash {}", manifest.spec_hash));
}

#[test]
fn usage_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    std::fs::write(&spec, SPEC).unwrap();
    let out = s(dir.path());
    let bad_split = lfbnet(&["gen-data", "--spec", s(&spec), "--n", "10", "--out", out, "--split", "0.5,0.2,0.1"]);
    assert_eq!(bad_split.status.code(), Some(2), "{}", stderr(&bad_split));
    assert_eq!(lfbnet(&["train"]).status.code(), Some(2));
    assert_eq!(lfbnet(&["no-such-command"]).status.code(), Some(2));
    let threads = Command::new(env!("CARGO_BIN_EXE_lfbnet"))
        .args(["compare", "--report", "a", "--report", "b"])
        .env("LFBNET_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(2));
    assert_eq!(lfbnet(&["compare", "--report", "a"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    std::fs::write(&spec, SPEC).unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let unwritable = lfbnet(&["gen-data", "--spec", s(&spec), "--n", "20", "--out", s(&blocker.join("sub"))]);
    assert_eq!(unwritable.status.code(), Some(1));
    assert!(stderr(&unwritable).contains("writing dataset"));

    let missing = dir.path().join("missing.toml");
    std::fs::write(&missing, "out_dir = \"o\"\ndataset = \"nowhere/manifest.txt\"\n").unwrap();
    let o = lfbnet(&["train", "--config", s(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("does not exist"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "out_dir = \"o\"\nbogus = 1\n").unwrap();
    assert_eq!(lfbnet(&["train", "--config", s(&bad)]).status.code(), Some(1));
}

#[test]
fn train_lfb_and_fs_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    ok(lfbnet(&["train", "--config", s(&experiment(dir.path(), "lfb", 2))]));
    let run = dir.path().join("run_lfb");
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().next().unwrap(), "cycle,step,train_loss,val_loss,val_dice");
    assert_eq!(history.lines().count() - 1, 3 * 2);
    let bundle = CheckpointBundle::load(&run.join("checkpoint.lfbc")).unwrap();
    assert!(bundle.has_group(Group::FeedbackEncoder) && bundle.has_group(Group::FeedbackDecoder));

    ok(lfbnet(&["train", "--config", s(&experiment(dir.path(), "fs", 2))]));
    let run = dir.path().join("run_fs");
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count() - 1, 2);
    let bundle = CheckpointBundle::load(&run.join("checkpoint.lfbc")).unwrap();
    assert!(!bundle.has_group(Group::FeedbackEncoder) && !bundle.has_group(Group::FeedbackDecoder));
    assert!(bundle.tensors.iter().all(|(name, _)| name.starts_with("S_")));
}

#[test]
fn eval_reports_per_iteration_and_oracle() {
    let dir = tempfile::tempdir().unwrap();
    ok(lfbnet(&["train", "--config", s(&experiment(dir.path(), "lfb", 1))]));
    let run = dir.path().join("run_lfb");
    let ckpt = run.join("checkpoint.lfbc");
    let data = run.join("data/manifest.txt");
    ok(lfbnet(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--iterations", "0"]));
    ok(lfbnet(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--iterations", "1", "--thresholds"]));
    let it0 = std::fs::read_to_string(run.join("eval_test_it0.csv")).unwrap();
    let it1 = std::fs::read_to_string(run.join("eval_test_it1.csv")).unwrap();
    assert_eq!(it0.lines().count(), 1 + 10 * 4);
    assert!(it1.lines().next().unwrap().ends_with(",dice_below,hd_above"));
    assert!(run.join("eval_test_it0_summary.csv").exists() && run.join("eval_test_it1_summary.csv").exists());

    let out = dir.path().join("oracle.csv");
    ok(lfbnet(&["eval", "--oracle", "--data", s(&data), "--out", s(&out)]));
    let oracle = std::fs::read_to_string(&out).unwrap();
    for line in oracle.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!((cols[2], cols[3], cols[4]), ("1.0", "0.0", "0.0"), "{line}");
    }
}

#[test]
fn eval_rejects_size_mismatch_naming_both_shapes() {
    let dir = tempfile::tempdir().unwrap();
    ok(lfbnet(&["train", "--config", s(&experiment(dir.path(), "fs", 1))]));
    let small = gen(dir.path(), 32);
    let o = lfbnet(&["eval", "--checkpoint", s(&dir.path().join("run_fs/checkpoint.lfbc")), "--data", s(&small)]);
    assert_eq!(o.status.code(), Some(1));
    let msg = stderr(&o);
    assert!(msg.contains("1x32x32") && msg.contains("1x64x64"), "{msg}");
}

fn write_report(path: &Path, dice: &[f64]) {
    let mut text = String::from("id,class,dice,hd_mm,rvd,holes,components\n");
    for (i, d) in dice.iter().enumerate() {
        text.push_str(&format!("{i:05},1,{d},2.0,0.1,0,1\n"));
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn compare_flags_significance_by_exact_test() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let c = dir.path().join("c.csv");
    write_report(&a, &[0.6, 0.65, 0.9, 0.41, 0.6, 0.7]);
    write_report(&b, &[0.5, 0.6, 0.7, 0.4, 0.55, 0.65]);
    write_report(&c, &[0.6, 0.65, 0.9, 0.41, 0.55, 0.65]);

    let out = ok(lfbnet(&["compare", "--report", s(&a), "--report", s(&a)]));
    assert!(out.contains("significant 0 of 3"), "{out}");

    let out = ok(lfbnet(&["compare", "--report", s(&a), "--report", s(&b)]));
    let dice = out.lines().find(|l| l.starts_with("1,dice,")).unwrap();
    assert!(dice.contains(",0.03125,1,exact"), "{dice}");

    let out = ok(lfbnet(&["compare", "--report", s(&c), "--report", s(&b)]));
    let dice = out.lines().find(|l| l.starts_with("1,dice,")).unwrap();
    assert!(dice.contains(",0,insufficient data (4 nonzero differences)"), "{dice}");

    let d = dir.path().join("d.csv");
    write_report(&d, &[0.6, 0.65, 0.9, 0.41, 0.6]);
    assert_eq!(lfbnet(&["compare", "--report", s(&a), "--report", s(&d)]).status.code(), Some(1));
}

#[test]
fn ablate_trains_every_variant_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(dir.path(), "lfb", 1);
    let out = ok(lfbnet(&["ablate", "--config", s(&cfg), "--variants", "fs,fs_star,lfb", "--seeds", "1,2"]));
    let root = dir.path().join("run_lfb/ablation");
    let checkpoints = std::fs::read_dir(&root)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().join("checkpoint.lfbc").exists())
        .count();
    assert_eq!(checkpoints, 6);
    let tests = std::fs::read_to_string(root.join("ablation_tests.csv")).unwrap();
    for pair in ["fs,fs_star", "fs,lfb", "fs_star,lfb"] {
        for metric in ["dice", "hd_mm"] {
            assert_eq!(tests.lines().filter(|l| l.starts_with(pair) && l.contains(&format!(",{metric},"))).count(), 4);
        }
    }
    assert!(out.contains("table "));

    let o = lfbnet(&["ablate", "--config", s(&cfg), "--variants", "fs,unet"]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("unknown variant"));
    assert_eq!(lfbnet(&["ablate", "--config", s(&cfg), "--variants", "lfb"]).status.code(), Some(2));
}

#[test]
fn ablate_self_comparison_has_unit_p_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(dir.path(), "fs", 1);
    ok(lfbnet(&["ablate", "--config", s(&cfg), "--variants", "fs,fs", "--seeds", "4"]));
    let tests = std::fs::read_to_string(dir.path().join("run_fs/ablation/ablation_tests.csv")).unwrap();
    for line in tests.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!((cols[0], cols[1]), ("fs", "fs"));
        assert_eq!(cols[5], "0.0", "{line}");
        assert_eq!(cols[6], "1.0", "{line}");
        assert_eq!(cols[7], "0", "{line}");
    }
}
