use fpf::evaluator::*;
use proptest::prelude::*;

/// O(n²) pairwise definition.
fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / pairs
}

fn confusion_bacc(scores: &[f64], labels: &[u8], t: f64) -> f64 {
    let mut c = [[0usize; 2]; 2];
    for (&s, &l) in scores.iter().zip(labels) {
        c[l as usize][usize::from(s >= t)] += 1;
    }
    let tpr = c[1][1] as f64 / (c[1][0] + c[1][1]) as f64;
    let tnr = c[0][0] as f64 / (c[0][0] + c[0][1]) as f64;
    (tpr + tnr) / 2.0
}

/// Scores on a coarse grid so ties are common.
fn score_sets() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..=500).prop_flat_map(|n| {
        (
            prop::collection::vec((0u32..40).prop_map(|k| k as f64 / 40.0), n),
            prop::collection::vec(0u8..=1, n),
        )
            .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
    })
}

fn make(scores: &[f64], labels: &[u8]) -> ScoreSet {
    ScoreSet::new(scores.to_vec(), labels.to_vec(), ScoreGrouping::Frame).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auc_matches_pairwise_oracle_and_roc_area((scores, labels) in score_sets()) {
        let set = make(&scores, &labels);
        let a = auc(&set).unwrap();
        prop_assert!((a - pairwise_auc(&scores, &labels)).abs() <= 1e-12);
        let roc = roc_curve(&set).unwrap();
        prop_assert!((a - trapezoid_area(&roc)).abs() <= 1e-12);
        prop_assert_eq!(roc[0], (0.0, 0.0));
        prop_assert_eq!(*roc.last().unwrap(), (1.0, 1.0));
        prop_assert!(roc.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
    }

    #[test]
    fn auc_invariant_under_monotone_transforms((scores, labels) in score_sets()) {
        let base = auc(&make(&scores, &labels)).unwrap();
        let cubed: Vec<f64> = scores.iter().map(|s| (3.0 * s - 1.0).powi(3)).collect();
        let logit: Vec<f64> = scores.iter().map(|s| ((s + 0.01) / (1.01 - s)).ln()).collect();
        prop_assert_eq!(auc(&make(&cubed, &labels)).unwrap(), base);
        prop_assert_eq!(auc(&make(&logit, &labels)).unwrap(), base);
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        prop_assert!((auc(&make(&scores, &flipped)).unwrap() - (1.0 - base)).abs() <= 1e-12);
    }

    #[test]
    fn balanced_accuracy_matches_confusion_oracle((scores, labels) in score_sets(), t in 0.0f64..1.0) {
        let set = make(&scores, &labels);
        prop_assert!((balanced_accuracy(&set, t).unwrap() - confusion_bacc(&scores, &labels, t)).abs() < 1e-12);
        // Duplicating every real sample leaves the metric unchanged.
        let mut s2 = scores.clone();
        let mut l2 = labels.clone();
        for (s, l) in scores.iter().zip(&labels) {
            if *l == 0 {
                s2.push(*s);
                l2.push(0);
            }
        }
        prop_assert!((balanced_accuracy(&make(&s2, &l2), t).unwrap() - balanced_accuracy(&set, t).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn all_correct_balanced_accuracy_is_one() {
    let set = make(&[0.9, 0.6, 0.5, 0.1, 0.49], &[1, 1, 1, 0, 0]);
    assert_eq!(balanced_accuracy(&set, DEFAULT_THRESHOLD).unwrap(), 1.0);
}

#[test]
fn single_class_is_a_metric_error() {
    let set = make(&[0.1, 0.2], &[1, 1]);
    assert!(matches!(auc(&set), Err(fpf::Error::Metric(_))));
    assert!(matches!(roc_curve(&set), Err(fpf::Error::Metric(_))));
    assert!(matches!(balanced_accuracy(&set, 0.5), Err(fpf::Error::Metric(_))));
    assert!(ScoreSet::new(vec![0.1], vec![1, 0], ScoreGrouping::Frame).is_err());
}

fn fixture_report() -> TransferReport {
    let splits = ["NT", "DF", "FS", "F2F"];
    let mut cells = Vec::new();
    for (m, model) in ["Combined", "Chin", "Nose"].iter().enumerate() {
        for (t, train) in splits.iter().enumerate() {
            for grouping in [ScoreGrouping::Frame, ScoreGrouping::Video] {
                for (e, eval) in splits.iter().enumerate() {
                    let k = m * 16 + t * 4 + e;
                    let g = usize::from(grouping == ScoreGrouping::Frame);
                    cells.push(TransferCell {
                        train_split: train.to_string(),
                        eval_split: eval.to_string(),
                        model_name: model.to_string(),
                        grouping,
                        auc: (50 + (k * 37) % 49 - g) as f64 / 100.0,
                        balanced_accuracy: (50 + (k * 23) % 45) as f64 / 100.0,
                        n_videos: 140,
                        n_frames: 560,
                        in_distribution: train == eval,
                    });
                }
            }
        }
    }
    TransferReport { cells }
}

/// Compares against a checked-in file; `UPDATE_GOLDEN=1` rewrites it instead.
fn golden(name: &str, actual: &str) {
    let path = format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    assert_eq!(actual, std::fs::read_to_string(&path).unwrap(), "{name}");
}

#[test]
fn report_matches_golden_files() {
    let report = fixture_report();
    golden("transfer_report.csv", &render_report(&report, ReportFormat::Csv));
    golden("transfer_report.md", &render_report(&report, ReportFormat::Markdown));
}

#[test]
fn csv_parse_markdown_roundtrip() {
    let report = fixture_report();
    let csv = render_report(&report, ReportFormat::Csv);
    let back = parse_report_csv(&csv).unwrap();
    assert_eq!(render_report(&back, ReportFormat::Markdown), render_report(&report, ReportFormat::Markdown));
    assert_eq!(render_report(&back, ReportFormat::Csv), csv);
    let sorted: Vec<_> = report.sorted().into_iter().cloned().collect();
    assert_eq!(back.cells, sorted);
}

#[test]
fn report_orders_models_and_splits() {
    let csv = render_report(&fixture_report(), ReportFormat::Csv);
    let rows: Vec<(String, String, String)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[2].to_string(), f[0].to_string(), f[1].to_string())
        })
        .collect();
    assert_eq!(rows[0], ("Nose".into(), "DF".into(), "DF".into()));
    assert_eq!(rows[1].2, "F2F");
    assert_eq!(rows.last().unwrap(), &("Combined".to_string(), "NT".to_string(), "NT".to_string()));
}
