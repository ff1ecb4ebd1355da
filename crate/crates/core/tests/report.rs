mod common;

use common::toy::{toy_data, toy_net};
use lfbnet::metrics::WilcoxonOutcome;
use lfbnet::report::{
    ablation_tables, compare_reports, comparison_csv, evaluate_dataset, AblationRun, LookupSegmenter, Metric, MetricRow,
    MetricsReport, ModelSegmenter, Thresholds,
};
use lfbnet::trainer::NormStats;

fn row(id: &str, class: u8, dice: f64, hd: Option<f64>) -> MetricRow {
    MetricRow { id: id.into(), class, dice, hd_mm: hd, rvd: Some(0.1), holes: 0, components: 1 }
}

fn report(dice: &[f64]) -> MetricsReport {
    let rows = dice.iter().enumerate().map(|(i, &d)| row(&format!("s{i}"), 1, d, Some(1.0 + d))).collect();
    MetricsReport { rows, thresholds: None }
}

#[test]
fn oracle_predictions_score_perfectly() {
    let data = toy_data(1, 6);
    let report = evaluate_dataset(&LookupSegmenter::ground_truth(&data), &data, [1.0, 1.0]).unwrap();
    assert_eq!(report.rows.len(), 6 * 4);
    for r in &report.rows {
        assert_eq!(r.dice, 1.0);
        assert_eq!(r.hd_mm, Some(0.0));
        assert_eq!(r.rvd, Some(0.0));
    }
    // the myocardium ring has one hole
    assert!(report.rows.iter().filter(|r| r.class == 2).all(|r| r.holes == 1 && r.components == 1));
}

#[test]
fn summary_is_recomputable_from_written_rows() {
    let data = toy_data(2, 5);
    let net = toy_net(3);
    let seg = ModelSegmenter { net: &net, stats: NormStats { mean: 0.4, std: 0.3 }, iterations: 1 };
    let mut report = evaluate_dataset(&seg, &data, [1.5, 1.5]).unwrap();
    report.thresholds = Some(Thresholds::default());
    let dir = tempfile::tempdir().unwrap();
    let summary_path = report.write(&dir.path().join("test.csv")).unwrap();
    let parsed = MetricsReport::read(&dir.path().join("test.csv")).unwrap();
    assert_eq!(parsed.rows, report.rows);

    let text = std::fs::read_to_string(summary_path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().ends_with(",violations,flagged"));
    for (line, class) in lines.zip(0u8..) {
        let cols: Vec<&str> = line.split(',').collect();
        let dice: Vec<f64> = parsed.rows.iter().filter(|r| r.class == class).map(|r| r.dice).collect();
        let n = dice.len() as f64;
        let mean = dice.iter().sum::<f64>() / n;
        let std = (dice.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((cols[2].parse::<f64>().unwrap() - mean).abs() <= 1e-9);
        assert!((cols[3].parse::<f64>().unwrap() - std).abs() <= 1e-9);
    }
}

#[test]
fn thresholds_flag_worst_cases() {
    let mut r = MetricsReport {
        rows: vec![row("a", 1, 0.95, Some(2.0)), row("b", 1, 0.80, Some(2.0)), row("c", 1, 0.95, Some(7.0)), row("d", 1, 0.9, None)],
        thresholds: None,
    };
    assert!(!r.rows_csv().contains("dice_below"));
    r.thresholds = Some(Thresholds::default());
    let csv = r.rows_csv();
    let flags: Vec<&str> = csv.lines().skip(1).map(|l| &l[l.len() - 3..]).collect();
    assert_eq!(flags, ["0,0", "1,0", "0,1", "0,0"]);
    assert_eq!(r.summary()[0].flagged, Some(2));
    assert_eq!(r.summary()[0].hd_n, 3);
}

#[test]
fn self_comparison_is_not_significant() {
    let a = report(&[0.9, 0.8, 0.85, 0.7, 0.95, 0.6, 0.75]);
    for c in compare_reports(&a, &a, &Metric::ALL).unwrap() {
        assert!(!c.significant());
        assert_eq!(c.mean_difference(), 0.0);
    }
}

#[test]
fn consistent_improvement_is_significant() {
    let b = report(&[0.5, 0.6, 0.7, 0.4, 0.55, 0.65]);
    let a = report(&[0.6, 0.65, 0.9, 0.41, 0.6, 0.7]);
    let cmp = compare_reports(&a, &b, &[Metric::Dice]).unwrap();
    assert_eq!(cmp[0].outcome.p_value(), Some(0.03125));
    assert!(cmp[0].significant());
    assert!(comparison_csv(&cmp).lines().nth(1).unwrap().contains(",0.03125,1,exact"));
}

#[test]
fn too_few_differences_are_not_tested() {
    let b = report(&[0.5, 0.6, 0.7, 0.4, 0.55, 0.65]);
    let a = report(&[0.6, 0.65, 0.9, 0.41, 0.55, 0.65]);
    let cmp = compare_reports(&a, &b, &[Metric::Dice]).unwrap();
    assert_eq!(cmp[0].outcome, WilcoxonOutcome::InsufficientData { nonzero: 4 });
    assert!(!cmp[0].significant());
    assert!(comparison_csv(&cmp).contains("insufficient data (4 nonzero differences)"));
}

#[test]
fn mismatched_ids_are_rejected() {
    let a = report(&[0.5, 0.6, 0.7]);
    let mut b = a.clone();
    b.rows[1].id = "other".into();
    assert!(compare_reports(&a, &b, &[Metric::Dice]).is_err());
}

#[test]
fn ablation_of_a_variant_against_itself() {
    let runs: Vec<AblationRun> = [("lfb", 1), ("lfb", 2), ("fs", 1), ("fs", 2)]
        .into_iter()
        .map(|(v, seed)| AblationRun { variant: v.into(), seed, report: report(&[0.5, 0.6, 0.7]) })
        .collect();
    let variants = vec!["lfb".to_string(), "lfb".to_string(), "fs".to_string()];
    let (table, tests) = ablation_tables(&runs, &variants).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("fs,")).count(), 3);
    let same: Vec<&str> = tests.lines().filter(|l| l.starts_with("lfb,lfb,")).collect();
    assert_eq!(same.len(), 2);
    for l in same {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!(cols[4], "6");
        assert_eq!(cols[5], "0.0");
        assert_eq!(cols[6], "1.0");
        assert_eq!(cols[7], "0");
    }
}

#[test]
fn wrong_image_size_names_both_shapes() {
    let data = toy_data(4, 1);
    let net = lfbnet::arch::LfbNet::new(
        lfbnet::arch::ModelConfig { input_size: [64, 64], ..common::toy::toy_model_config() },
        0,
    )
    .unwrap();
    let seg = ModelSegmenter { net: &net, stats: NormStats { mean: 0.0, std: 1.0 }, iterations: 0 };
    let msg = evaluate_dataset(&seg, &data, [1.0, 1.0]).unwrap_err().to_string();
    assert!(msg.contains("1x32x32") && msg.contains("1x64x64"), "{msg}");
}
