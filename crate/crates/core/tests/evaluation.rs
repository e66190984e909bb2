use proptest::prelude::*;
use semrel::config::RunConfig;
use semrel::data::FeatureRecord;
use semrel::diffmath::Matrix;
use semrel::embeddings::{random_embeddings, ClassRegistry};
use semrel::evaluation::{argmax, evaluate, forgetting_check, MetricsReport};
use semrel::head::{build_head, GraphKind, Head, HeadConfig, HeadMode};
use semrel::pipeline::{run_seeds, seed_list, shot_sweep};
use semrel::Error;

fn baseline_head(classes: &[&str]) -> Head {
    let reg = ClassRegistry::new(classes, &[]).unwrap();
    let we = random_embeddings(&reg, 8, 1).unwrap();
    let cfg = HeadConfig {
        mode: HeadMode::Baseline,
        graph: GraphKind::None,
        d_in: 4,
        d: 6,
        ..HeadConfig::default()
    };
    build_head(&cfg, &reg, &we, None, 1).unwrap()
}

fn records_per_class(head: &Head, per_class: usize) -> Vec<FeatureRecord> {
    let mut out = Vec::new();
    for c in head.registry().entries() {
        for i in 0..per_class {
            out.push(FeatureRecord {
                id: format!("{}-{i}", c.name),
                label: c.name.clone(),
                feat: vec![i as f64, 1.0, -0.5, 0.25],
                reg: None,
            });
        }
    }
    out
}

#[test]
fn perfect_predictor_scores_one_everywhere() {
    let head = baseline_head(&["a", "b", "c"]);
    let labels = vec![0, 1, 2, 3, 2, 1];
    let mut logits = Matrix::zeros(labels.len(), 4);
    for (i, &y) in labels.iter().enumerate() {
        logits.set(i, y, 5.0);
    }
    let report = MetricsReport::from_logits(&head, &logits, &labels).unwrap();
    assert_eq!(report.accuracy, 1.0);
    assert_eq!(report.mean_base_acc, Some(1.0));
    assert_eq!(report.mean_novel_acc, None);
    assert!(report.classes.iter().all(|c| c.accuracy == Some(1.0)));
}

#[test]
fn uniform_logits_fall_to_the_lowest_index() {
    let mut head = baseline_head(&["a", "b", "c"]);
    *head.param_mut("cls.weight").unwrap() = Matrix::zeros(4, 6);
    let data = records_per_class(&head, 5);
    let report = evaluate(&head, &data).unwrap();
    assert_eq!(report.accuracy, 0.25);
    for (i, row) in report.confusion.iter().enumerate() {
        assert_eq!(row, &[5, 0, 0, 0], "row {i}");
    }
    assert_eq!(report.classes[0].accuracy, Some(1.0));
    assert_eq!(report.classes[3].accuracy, Some(0.0));
}

#[test]
fn evaluation_rejects_bad_input() {
    let head = baseline_head(&["a", "b"]);
    assert!(evaluate(&head, &[]).is_err());
    let mut data = records_per_class(&head, 1);
    data[0].label = "zebra".into();
    assert!(matches!(evaluate(&head, &data), Err(Error::UnknownClass(name)) if name == "zebra"));
}

#[test]
fn report_csv_has_stable_columns() {
    let head = baseline_head(&["a"]);
    let report = evaluate(&head, &records_per_class(&head, 2)).unwrap();
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "class,kind,count,correct,accuracy");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("a,base,2,"));
    assert!(lines[2].starts_with("background,background,2,"));
}

#[test]
fn forgetting_identity_and_mismatch() {
    let head = baseline_head(&["a", "b", "c"]);
    let report = evaluate(&head, &records_per_class(&head, 3)).unwrap();
    let same = forgetting_check(&report, &report).unwrap();
    assert_eq!(same.classes.len(), 3);
    assert!(same.classes.iter().all(|c| c.delta == 0.0));
    assert_eq!(same.mean_delta, 0.0);

    let other = baseline_head(&["a", "b", "d"]);
    let after = evaluate(&other, &records_per_class(&other, 3)).unwrap();
    assert!(matches!(forgetting_check(&report, &after), Err(Error::UnknownClass(name)) if name == "c"));
    let fewer = baseline_head(&["a", "b"]);
    let after = evaluate(&fewer, &records_per_class(&fewer, 3)).unwrap();
    assert!(forgetting_check(&report, &after).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    // Integer-valued logits keep the shifted comparison exact.
    #[test]
    fn prediction_ignores_constant_logit_shift(
        rows in prop::collection::vec(prop::collection::vec(-1000i32..1000, 4), 1..20),
        shift in -1_000_000i32..1_000_000,
    ) {
        let head = baseline_head(&["a", "b", "c"]);
        let n = rows.len();
        let base: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect();
        let shifted: Vec<Vec<f64>> = base.iter().map(|r| r.iter().map(|v| v + f64::from(shift)).collect()).collect();
        for (a, b) in base.iter().zip(&shifted) {
            prop_assert_eq!(argmax(a), argmax(b));
        }
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let ra = MetricsReport::from_logits(&head, &Matrix::from_rows(&base).unwrap(), &labels).unwrap();
        let rb = MetricsReport::from_logits(&head, &Matrix::from_rows(&shifted).unwrap(), &labels).unwrap();
        prop_assert_eq!(ra, rb);
    }

    #[test]
    fn confusion_accounts_for_every_record(
        logits in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..40),
        seed in any::<u64>(),
    ) {
        let head = baseline_head(&["a", "b", "c"]);
        let labels: Vec<usize> = (0..logits.len()).map(|i| ((seed >> (i % 60)) as usize + i) % 4).collect();
        let report = MetricsReport::from_logits(&head, &Matrix::from_rows(&logits).unwrap(), &labels).unwrap();
        let total: usize = report.confusion.iter().flatten().sum();
        prop_assert_eq!(total, report.records);
        prop_assert_eq!(total, labels.len());
        for (row, class) in report.confusion.iter().zip(&report.classes) {
            prop_assert_eq!(row.iter().sum::<usize>(), class.count);
            prop_assert!(class.accuracy.is_none_or(|a| (0.0..=1.0).contains(&a)));
        }
    }
}

fn small_run() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.head.mode = HeadMode::Ssp;
    cfg.head.graph = GraphKind::None;
    cfg.synth.train_per_class = 8;
    cfg.synth.test_per_class = 4;
    cfg.train.steps = Some(60);
    cfg
}

#[test]
fn sweep_shape_and_determinism() {
    let cfg = small_run();
    let one = shot_sweep(&cfg, &[1], &[3]).unwrap();
    assert_eq!(one.rows.len(), 1);
    assert_eq!((one.rows[0].k, one.rows[0].seed), (1, 3));

    let a = shot_sweep(&cfg, &[2, 1], &[5, 4]).unwrap();
    assert_eq!(a.rows.iter().map(|r| (r.k, r.seed)).collect::<Vec<_>>(), [(1, 4), (1, 5), (2, 4), (2, 5)]);
    let b = shot_sweep(&cfg, &[2, 1], &[5, 4]).unwrap();
    let csv = |t: &semrel::evaluation::SweepTable| {
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        buf
    };
    assert_eq!(csv(&a), csv(&b));
    assert_eq!(a.summary().len(), 2);

    assert!(shot_sweep(&cfg, &[], &[1]).is_err());
}

#[test]
fn sweep_wraps_inner_failures_with_seed_and_k() {
    let cfg = small_run();
    let err = shot_sweep(&cfg, &[100], &[2]).unwrap_err();
    assert!(matches!(err, Error::Run { seed: 2, k: 100, .. }), "{err}");
}

/// Full benchmark, SRR with the dynamic graph: mean novel accuracy over 20
/// seeds must not fall as k grows, and k=3 fine-tuning must cost at most
/// 0.02 of mean base accuracy.
#[test]
fn srr_benchmark_is_shot_monotone_and_keeps_base_accuracy() {
    let mut cfg = RunConfig::default();
    cfg.head.mode = HeadMode::Srr;
    cfg.head.graph = GraphKind::Dynamic;
    let shots = [1, 2, 3, 5, 10];
    let runs = run_seeds(&cfg, &shots, &seed_list(&cfg)).unwrap();
    assert_eq!(runs.len(), 20);
    let mean_novel: Vec<f64> = (0..shots.len())
        .map(|j| runs.iter().map(|r| r.per_k[j].report.mean_novel_acc.unwrap()).sum::<f64>() / runs.len() as f64)
        .collect();
    for w in mean_novel.windows(2) {
        assert!(w[1] >= w[0], "novel means {mean_novel:?}");
    }
    let deltas: Vec<f64> = runs
        .iter()
        .map(|r| forgetting_check(&r.base_report, &r.per_k[2].report).unwrap().mean_delta)
        .collect();
    let mean_delta = deltas.iter().sum::<f64>() / deltas.len() as f64;
    assert!(mean_delta >= -0.02, "mean base delta {mean_delta}");
}
