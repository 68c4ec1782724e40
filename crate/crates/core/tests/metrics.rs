use std::fs;

use dgdata_core::components::Prediction;
use dgdata_core::data::{synth_crossuser, Domain, SynthConfig, WindowedSample};
use dgdata_core::metrics::{confusion_matrix, evaluate, ConfusionMatrix, Metrics, Predictor};
use dgdata_core::report::{confusion_csv, digest_file, digest_split, report, sha256_hex, RunManifest};
use dgdata_core::train::{TrainConfig, TrainHistory};
use dgdata_core::{CoreError, Result};
use proptest::prelude::*;

proptest! {
    #[test]
    fn confusion_matrix_identities(
        pairs in (2usize..7).prop_flat_map(|c| (Just(c), prop::collection::vec((0..c, 0..c), 1..200)))
    ) {
        let (classes, pairs) = pairs;
        let truths: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let preds: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let cm = confusion_matrix(&preds, &truths, classes).unwrap();
        prop_assert_eq!(cm.total() as usize, pairs.len());
        let hits = pairs.iter().filter(|p| p.0 == p.1).count();
        prop_assert_eq!(cm.trace() as usize, hits);
        for c in 0..classes {
            prop_assert_eq!(cm.row_sum(c) as usize, truths.iter().filter(|&&t| t == c).count());
            prop_assert_eq!(cm.column_sum(c) as usize, preds.iter().filter(|&&p| p == c).count());
        }
        let m = Metrics::from_confusion(cm.clone());
        prop_assert!((m.accuracy - hits as f64 / pairs.len() as f64).abs() < 1e-15);
        let support: u64 = m.per_class.iter().map(|c| c.support).sum();
        prop_assert_eq!(support as usize, pairs.len());
        prop_assert!(m.per_class.iter().all(|c| (0.0..=1.0).contains(&c.precision) && (0.0..=1.0).contains(&c.recall)));

        let mut doubled = cm.clone();
        doubled.add(&cm).unwrap();
        prop_assert_eq!(doubled.total(), 2 * cm.total());
        prop_assert_eq!(Metrics::from_confusion(doubled).accuracy, m.accuracy);
    }
}

#[test]
fn adding_mismatched_matrices_fails() {
    let mut a = ConfusionMatrix::zeros(2);
    assert!(a.add(&ConfusionMatrix::zeros(3)).is_err());
    assert!(matches!(confusion_matrix(&[0], &[0, 1], 2), Err(CoreError::Data(_))));
}

/// Predicts the class encoded in the first value of the window.
struct Oracle;

impl Predictor for Oracle {
    fn predict(&self, windows: &[&[f64]]) -> Result<Vec<Prediction>> {
        Ok(windows
            .iter()
            .map(|w| Prediction {
                label: w[0] as usize,
                probabilities: Vec::new(),
            })
            .collect())
    }
}

struct Constant(usize);

impl Predictor for Constant {
    fn predict(&self, windows: &[&[f64]]) -> Result<Vec<Prediction>> {
        Ok(windows
            .iter()
            .map(|_| Prediction {
                label: self.0,
                probabilities: Vec::new(),
            })
            .collect())
    }
}

fn labeled(n: usize, classes: usize) -> Vec<WindowedSample> {
    (0..n)
        .map(|i| WindowedSample {
            values: vec![(i % classes) as f64, 0.0],
            channels: 1,
            width: 2,
            domain: Domain::Target,
            activity: Some(i % classes),
            user_id: "t".into(),
            recording: 0,
            seq_index: i,
            start: i,
        })
        .collect()
}

#[test]
fn evaluation_of_reference_predictors() {
    // More than one evaluation chunk, so the parallel path is exercised.
    let windows = labeled(900, 3);
    let perfect = evaluate(&Oracle, &windows, 3).unwrap();
    assert_eq!(perfect.accuracy, 1.0);
    assert!(perfect.per_class.iter().all(|c| c.precision == 1.0 && c.recall == 1.0 && c.support == 300));

    let constant = evaluate(&Constant(1), &windows, 3).unwrap();
    assert!((constant.accuracy - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(constant.confusion.column_sum(1), 900);
    assert_eq!(constant.per_class[0].recall, 0.0);

    assert!(matches!(evaluate(&Oracle, &[], 3), Err(CoreError::Data(_))));
    let mut unlabeled = labeled(2, 2);
    unlabeled[1].activity = None;
    assert!(matches!(evaluate(&Oracle, &unlabeled, 2), Err(CoreError::Data(_))));
    assert!(matches!(evaluate(&Constant(5), &labeled(2, 2), 2), Err(CoreError::Label(_))));
}

#[test]
fn confusion_csv_rows_are_true_classes() {
    let cm = confusion_matrix(&[1, 1, 0, 2], &[0, 1, 0, 2], 3).unwrap();
    let names = ["sit".to_string(), "walk".into(), "run".into()];
    assert_eq!(confusion_csv(&cm, &names), "true\\predicted,sit,walk,run\nsit,1,1,0\nwalk,0,1,0\nrun,0,0,1\n");
}

fn run_report(dir: &std::path::Path, preds: &[usize]) -> RunManifest {
    let cm = confusion_matrix(preds, &[0, 1, 1, 0], 2).unwrap();
    let metrics = Metrics::from_confusion(cm);
    let mut manifest = RunManifest::new("train", "dgdata", &TrainConfig::desk()).unwrap();
    manifest.seeds.insert("train".into(), 3);
    report(&metrics, &["a".into(), "b".into()], Some(&TrainHistory::default()), &mut manifest, dir).unwrap();
    manifest
}

#[test]
fn report_files_round_trip_and_are_digested() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = run_report(dir.path(), &[0, 1, 0, 0]);
    let metrics: Metrics = serde_json::from_slice(&fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics.accuracy, 0.75);
    assert_eq!(metrics.confusion.counts, vec![vec![2, 0], vec![1, 1]]);
    for name in ["metrics.json", "confusion.csv", "history.csv", "history.json"] {
        assert_eq!(manifest.outputs[name], digest_file(&dir.path().join(name)).unwrap(), "{name}");
    }
    let written: RunManifest = serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(written, manifest);

    let again = tempfile::tempdir().unwrap();
    let same = run_report(again.path(), &[0, 1, 0, 0]);
    assert_eq!(same.outputs, manifest.outputs);
    let other = run_report(again.path(), &[0, 1, 1, 0]);
    assert_ne!(other.outputs["metrics.json"], manifest.outputs["metrics.json"]);
    assert_eq!(other.outputs["history.csv"], manifest.outputs["history.csv"]);
}

#[test]
fn report_rejects_wrong_class_names() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = Metrics::from_confusion(ConfusionMatrix::zeros(2));
    let mut manifest = RunManifest::new("eval", "dgdata", &()).unwrap();
    let err = report(&metrics, &["only".into()], None, &mut manifest, dir.path());
    assert!(matches!(err, Err(CoreError::Label(_))));
}

#[test]
fn split_digest_tracks_every_input() {
    let cfg = SynthConfig {
        windows_per_user: 30,
        ..SynthConfig::default()
    };
    let split = synth_crossuser(&cfg, 1).unwrap();
    let base = digest_split(&split);
    assert_eq!(base, digest_split(&synth_crossuser(&cfg, 1).unwrap()));
    assert_ne!(base, digest_split(&synth_crossuser(&cfg, 2).unwrap()));

    let mut label = split.clone();
    label.target_test[0].activity = Some((label.target_test[0].activity.unwrap() + 1) % 3);
    assert_ne!(base, digest_split(&label));
    let mut value = split.clone();
    value.source_train[3].values[7] += 1e-12;
    assert_ne!(base, digest_split(&value));
    let mut names = split;
    names.class_names[0] = "other".into();
    assert_ne!(base, digest_split(&names));
    assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
