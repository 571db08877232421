use hostcp::harness::{
    emit_report, linear_fit, ndcg_at_k, retrain, run_addition_curve, run_experiment, run_mislabel,
    run_ndcg, run_removal_curve, run_timing, DataSource, ExperimentConfig, ExperimentKind, Report,
};
use hostcp::trainer::TrainerConfig;
use proptest::prelude::*;

fn small(kind: ExperimentKind) -> ExperimentConfig {
    ExperimentConfig {
        experiment: Some(kind),
        source: DataSource::Synthetic { n: 120, d: 4, seed: 3 },
        fractions: vec![0.2, 1.0],
        seeds: vec![0, 1],
        test_size: 60,
        retrain_epochs: 10,
        trainer: TrainerConfig {
            epochs: 2,
            k: 8,
            predictor_arch: vec![8],
            embedder_arch: vec![6, 4],
            ..TrainerConfig::default()
        },
        timing_sizes: vec![40, 80],
        timing_batch_size: 10,
        ..ExperimentConfig::default()
    }
}

#[test]
fn ndcg_examples() {
    assert_eq!(ndcg_at_k(&[3.0, 2.0, 1.0], &[true, true, false], 3).unwrap(), 1.0);
    let reversed = ndcg_at_k(&[0.0, 1.0], &[true, false], 2).unwrap();
    assert!((reversed - 1.0 / 3f64.log2()).abs() <= 1e-15);
    assert!((reversed - 0.6309).abs() < 1e-4);
    assert_eq!(ndcg_at_k(&[5.0, 1.0, 0.0], &[true, false, false], 1).unwrap(), 1.0);
    // Ties go to the smaller id.
    assert_eq!(ndcg_at_k(&[1.0, 1.0], &[true, false], 1).unwrap(), 1.0);
    assert_eq!(ndcg_at_k(&[1.0, 1.0], &[false, true], 1).unwrap(), 0.0);
    assert!(ndcg_at_k(&[1.0, 2.0], &[false, false], 2).is_err());
    assert!(ndcg_at_k(&[1.0, 2.0], &[true, false], 3).is_err());
    assert!(ndcg_at_k(&[1.0, 2.0], &[true], 1).is_err());
}

proptest! {
    #[test]
    fn ndcg_lies_in_unit_interval(
        items in prop::collection::vec((-10.0f64..10.0, any::<bool>()), 1..40),
        k_frac in 0.0f64..1.0,
    ) {
        let scores: Vec<f64> = items.iter().map(|p| p.0).collect();
        let mut rel: Vec<bool> = items.iter().map(|p| p.1).collect();
        rel[0] = true;
        let k = 1 + ((scores.len() - 1) as f64 * k_frac) as usize;
        let v = ndcg_at_k(&scores, &rel, k).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
    }
}

#[test]
fn linear_fit_recovers_a_line() {
    let x = [1.0, 2.0, 3.0, 4.0];
    let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
    let (slope, intercept, r2) = linear_fit(&x, &y);
    assert!((slope - 2.0).abs() < 1e-12 && (intercept - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
}

#[test]
fn config_rejects_unknown_and_invalid_keys() {
    assert!(ExperimentConfig::from_json(r#"{"experiment":"addition"}"#).is_ok());
    assert!(ExperimentConfig::from_json(r#"{"experiment":"addition","bogus":1}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"trainer":{"alpha":1.0,"lr":2}}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"fractions":[0.5,0.2]}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"fractions":[0.0]}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"source":{"kind":"synthetic","n":10,"d":2,"seed":0,"x":1}}"#).is_err());
    let cfg = ExperimentConfig::from_json(r#"{"experiment":"gen-data","source":{"kind":"csv","path":"a.csv"}}"#).unwrap();
    assert_eq!(cfg.experiment, Some(ExperimentKind::GenData));
    assert!(matches!(
        ExperimentConfig::from_json("{").unwrap_err(),
        hostcp::Error::Config(_)
    ));
}

#[test]
fn emitted_report_round_trips() {
    let report = run_removal_curve(&small(ExperimentKind::Removal)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&report, dir.path()).unwrap();
    assert_eq!(files.len(), 3);
    let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let back: Report = serde_json::from_str(&text).unwrap();
    assert_eq!(back, report);
    let csv = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "fraction,mean,stddev");
    assert_eq!(lines.len() - 1, report.config.fractions.len());
    let dat = std::fs::read_to_string(dir.path().join("curve.dat")).unwrap();
    assert_eq!(dat.lines().filter(|l| !l.starts_with('#')).count(), 2);
}

#[test]
fn empty_fractions_give_header_only_files() {
    let mut cfg = small(ExperimentKind::Addition);
    cfg.fractions.clear();
    let report = run_addition_curve(&cfg).unwrap();
    assert!(report.rows.is_empty());
    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    let dat = std::fs::read_to_string(dir.path().join("curve.dat")).unwrap();
    assert_eq!(dat.lines().count(), 1);
}

#[test]
fn full_fraction_addition_is_whole_set_training() {
    let cfg = small(ExperimentKind::Addition);
    let report = run_addition_curve(&cfg).unwrap();
    assert_eq!(report.rows.len(), cfg.fractions.len() * cfg.seeds.len());
    for row in report.rows.iter().filter(|r| r.fraction == 1.0) {
        let (train, test) = cfg.load_data(row.seed).unwrap();
        let (_, whole) = retrain(&train, &test, &cfg, row.seed + 2_000_000).unwrap();
        assert_eq!(row.accuracy, Some(whole));
        assert_eq!(row.baseline_accuracy, Some(whole));
        assert_eq!(row.train_size, Some(train.n()));
    }
    for row in &report.rows {
        for v in [row.accuracy, row.baseline_accuracy].into_iter().flatten() {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn removal_trains_on_the_exact_complement() {
    let cfg = small(ExperimentKind::Removal);
    let report = run_removal_curve(&cfg).unwrap();
    for row in &report.rows {
        let n = 120usize;
        let removed = ((row.fraction * n as f64) + 0.5).floor() as usize;
        assert_eq!(row.train_size, Some(n - removed));
    }
}

#[test]
fn mislabel_inspection_is_monotone_and_complete() {
    let mut cfg = small(ExperimentKind::Mislabel);
    cfg.fractions = vec![0.1, 0.3, 0.5, 1.0];
    cfg.seeds = vec![0];
    let report = run_mislabel(&cfg).unwrap();
    let fixed: Vec<f64> = report.rows.iter().map(|r| r.fixed_fraction.unwrap()).collect();
    assert!(fixed.windows(2).all(|w| w[0] <= w[1]), "{fixed:?}");
    assert_eq!(*fixed.last().unwrap(), 1.0);
    assert_eq!(report.rows.last().unwrap().baseline_fixed_fraction, Some(1.0));
}

#[test]
fn ndcg_report_values_are_in_range() {
    let mut cfg = small(ExperimentKind::Ndcg);
    cfg.fractions = vec![0.05, 0.1, 0.15, 0.25, 0.4];
    cfg.seeds = vec![0];
    let report = run_ndcg(&cfg).unwrap();
    assert_eq!(report.rows.len(), 5);
    for row in &report.rows {
        assert!((0.0..=1.0).contains(&row.ndcg.unwrap()));
        assert!((0.0..=1.0).contains(&row.baseline_ndcg.unwrap()));
    }
}

#[test]
fn timing_counts_and_records_every_step() {
    let cfg = small(ExperimentKind::Timing);
    let report = run_timing(&cfg).unwrap();
    let t = report.timings.as_ref().unwrap();
    for seed in &cfg.seeds {
        let calls: Vec<usize> = report.rows.iter().filter(|r| r.seed == *seed).map(|r| r.solver_calls.unwrap()).collect();
        assert_eq!(calls, vec![4, 8]);
    }
    for run in &t.runs {
        assert_eq!(run.step_seconds.len(), run.n / cfg.timing_batch_size);
        assert!(run.step_seconds.iter().all(|s| *s >= 0.0));
    }
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&report, dir.path()).unwrap();
    assert!(files.iter().any(|f| f.ends_with("timings.json")));
    let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    assert!(!text.contains("seconds"));
}

#[test]
fn reports_are_byte_identical_across_runs() {
    for kind in [ExperimentKind::Addition, ExperimentKind::Mislabel, ExperimentKind::Timing] {
        let cfg = small(kind);
        let a = run_experiment(&cfg).unwrap().to_json().unwrap();
        let b = run_experiment(&cfg).unwrap().to_json().unwrap();
        assert_eq!(a, b, "{kind:?}");
    }
}

#[test]
fn experiment_kind_is_required() {
    let mut cfg = small(ExperimentKind::Train);
    cfg.experiment = None;
    assert!(matches!(run_experiment(&cfg), Err(hostcp::Error::Config(_))));
}
