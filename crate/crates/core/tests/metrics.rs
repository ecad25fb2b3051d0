mod common;

use common::{direct_pearson, direct_rmse, direct_system_means, entry, noisy_label_dataset};
use naturalmos::audio_io::{DatasetManifest, LabelLevel};
use naturalmos::metrics::{aggregate_per_system, build_report, pearson_r, rmse, EvaluationReport, MetricError, SummaryKind};
use naturalmos::rng;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::HashMap;

#[test]
fn pearson_and_rmse_match_direct_formulas() {
    for i in 0..100 {
        let mut r = rng::stream(2024, "metric-pairs", i);
        let n = r.gen_range(3..200);
        let x: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.3 * v + r.gen_range(-1.0..1.0)).collect();
        assert!((pearson_r(&x, &y).unwrap() - direct_pearson(&x, &y)).abs() < 1e-12, "pair {i}");
        assert!((rmse(&x, &y).unwrap() - direct_rmse(&x, &y)).abs() < 1e-12, "pair {i}");
    }
}

#[test]
fn hand_derived_correlation() {
    // cov = 4, var·var = 25 (sums of squared deviations: 5 and 5).
    let r = pearson_r(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
    assert!((r - 0.8).abs() < 1e-12);
}

#[test]
fn non_finite_inputs_are_rejected() {
    assert!(matches!(pearson_r(&[1.0, f64::NAN, 3.0], &[1.0, 2.0, 3.0]), Err(MetricError::NonFinite)));
    assert!(matches!(rmse(&[1.0, 2.0], &[1.0]), Err(MetricError::LengthMismatch(2, 1))));
}

proptest! {
    #[test]
    fn pearson_is_affine_invariant(
        x in prop::collection::vec(-10.0f64..10.0, 5..40),
        seed in 0u64..1000,
        a in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0],
        b in -10.0f64..10.0,
    ) {
        let mut r = rng::stream(seed, "affine", 0);
        let y: Vec<f64> = x.iter().map(|_| r.gen_range(-1.0..1.0)).collect();
        let r0 = match pearson_r(&x, &y) { Ok(v) => v, Err(_) => return Ok(()) };
        let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let r1 = pearson_r(&xs, &y).unwrap();
        prop_assert!((r1 - a.signum() * r0).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&r1));
    }

    #[test]
    fn rmse_is_symmetric_and_non_negative(
        pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..50),
    ) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let a = rmse(&p, &t).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert_eq!(a, rmse(&t, &p).unwrap());
    }

    #[test]
    fn aggregation_ignores_entry_order(seed in 0u64..500) {
        let mut r = rng::stream(seed, "agg", 0);
        let (mut m, preds) = noisy_label_dataset("d", 4, 5, 0.3, &mut r);
        let before = aggregate_per_system(&preds, &m).unwrap();
        m.entries.shuffle(&mut r);
        let after = aggregate_per_system(&preds, &m).unwrap();
        prop_assert_eq!(before.len(), after.len());
        for (a, b) in before.iter().zip(&after) {
            prop_assert_eq!(&a.system_id, &b.system_id);
            prop_assert!((a.predicted - b.predicted).abs() < 1e-12);
            prop_assert!((a.subjective - b.subjective).abs() < 1e-12);
        }
    }
}

#[test]
fn duplicating_every_file_leaves_system_means_unchanged() {
    let mut r = rng::stream(4, "dup", 0);
    let (m, preds) = noisy_label_dataset("d", 3, 4, 0.5, &mut r);
    let mut doubled = m.clone();
    doubled.entries.extend(m.entries.iter().cloned());
    let a = aggregate_per_system(&preds, &m).unwrap();
    let b = aggregate_per_system(&preds, &doubled).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(y.n_files, 2 * x.n_files);
        assert!((x.predicted - y.predicted).abs() < 1e-12 && (x.subjective - y.subjective).abs() < 1e-12);
    }
}

#[test]
fn missing_prediction_names_the_file() {
    let m = DatasetManifest::new(vec![entry("a.wav", "d", "s", 3.0, LabelLevel::PerStimulus)], "m.csv");
    let err = aggregate_per_system(&HashMap::new(), &m).unwrap_err();
    assert!(matches!(err, MetricError::MissingPrediction(p) if p == "a.wav"));
}

#[test]
fn system_level_beats_stimulus_level_under_label_noise() {
    let mut r = rng::stream(77, "noise", 0);
    let (m, preds) = noisy_label_dataset("noisy", 10, 20, 0.7, &mut r);
    let report = build_report(&[(&m, "g", &preds)], vec![]).unwrap();
    let row = &report.datasets[0];
    assert_eq!((row.n_files, row.n_systems), (200, 10));

    let p: Vec<f64> = m.entries.iter().map(|e| preds[&e.path]).collect();
    let t: Vec<f64> = m.entries.iter().map(|e| e.mos).collect();
    let stim_r = direct_pearson(&p, &t);
    let rows: Vec<_> = m.entries.iter().map(|e| (e.system_id.clone(), preds[&e.path], e.mos)).collect();
    let (sp, st) = direct_system_means(&rows);
    let sys_r = direct_pearson(&sp, &st);
    assert!(sys_r > stim_r, "system {sys_r} vs stimulus {stim_r}");

    let stim = row.per_stimuli.unwrap();
    assert!((stim.r.unwrap() - stim_r).abs() < 1e-9);
    assert!((stim.rmse - direct_rmse(&p, &t)).abs() < 1e-9);
    assert!((row.per_system.r.unwrap() - sys_r).abs() < 1e-9);
    assert!((row.per_system.rmse - direct_rmse(&sp, &st)).abs() < 1e-9);
}

fn per_system_manifest(dataset: &str, systems: &[(&str, f64)], files: usize) -> DatasetManifest {
    let entries = systems
        .iter()
        .flat_map(|(s, mos)| {
            (0..files).map(move |f| entry(&format!("{dataset}_{s}_{f}.wav"), dataset, s, *mos, LabelLevel::PerSystem))
        })
        .collect();
    DatasetManifest::new(entries, format!("{dataset}.csv"))
}

#[test]
fn per_system_labels_omit_stimulus_scores() {
    let m = per_system_manifest("blz", &[("A", 4.1), ("B", 3.0), ("C", 2.2), ("D", 3.6)], 3);
    let preds: HashMap<String, f64> =
        m.entries.iter().enumerate().map(|(i, e)| (e.path.clone(), e.mos + 0.1 * (i % 3) as f64)).collect();
    let report = build_report(&[(&m, "test", &preds)], vec![]).unwrap();
    let row = &report.datasets[0];
    assert!(row.per_stimuli.is_none());
    assert_eq!(row.n_systems, 4);
    // Every system gets the same +0.1 mean offset.
    assert!((row.per_system.r.unwrap() - 1.0).abs() < 1e-12);
    assert!((row.per_system.rmse - 0.1).abs() < 1e-12);
}

#[test]
fn two_systems_report_rmse_without_correlation() {
    let m = per_system_manifest("small", &[("A", 4.0), ("B", 2.0)], 2);
    let preds: HashMap<String, f64> = m.entries.iter().map(|e| (e.path.clone(), 3.0)).collect();
    let report = build_report(&[(&m, "g", &preds)], vec![]).unwrap();
    assert_eq!(report.datasets[0].per_system.r, None);
    assert!((report.datasets[0].per_system.rmse - 1.0).abs() < 1e-12);
}

#[test]
fn group_summaries_use_mean_min_and_max() {
    let mut r = rng::stream(8, "groups", 0);
    let mut manifests = Vec::new();
    for (name, sigma) in [("d1", 0.2), ("d2", 0.6), ("d3", 1.0)] {
        manifests.push(noisy_label_dataset(name, 5, 6, sigma, &mut r));
    }
    let (other, other_preds) = noisy_label_dataset("held", 4, 4, 0.1, &mut r);
    let mut inputs: Vec<_> = manifests.iter().map(|(m, p)| (m, "val", p)).collect();
    inputs.push((&other, "test", &other_preds));
    let report = build_report(&inputs, vec![("seed".into(), "8".into())]).unwrap();
    assert_eq!(report.datasets.len(), 4);
    assert_eq!(report.summaries.len(), 4);

    let rows: Vec<_> = report.datasets.iter().filter(|d| d.group == "val").collect();
    let sys_r: Vec<f64> = rows.iter().map(|d| d.per_system.r.unwrap()).collect();
    let sys_rmse: Vec<f64> = rows.iter().map(|d| d.per_system.rmse).collect();
    let stim_r: Vec<f64> = rows.iter().map(|d| d.per_stimuli.unwrap().r.unwrap()).collect();
    let avg = report.summaries.iter().find(|s| s.group == "val" && s.kind == SummaryKind::Average).unwrap();
    let worst = report.summaries.iter().find(|s| s.group == "val" && s.kind == SummaryKind::WorstCase).unwrap();
    assert_eq!(avg.n_datasets, 3);
    assert!((avg.sys_r.unwrap() - sys_r.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    assert_eq!(worst.sys_r.unwrap(), sys_r.iter().cloned().fold(f64::MAX, f64::min));
    assert_eq!(worst.sys_rmse.unwrap(), sys_rmse.iter().cloned().fold(f64::MIN, f64::max));
    assert_eq!(worst.stim_r.unwrap(), stim_r.iter().cloned().fold(f64::MAX, f64::min));

    let text = report.to_csv();
    assert!(text.starts_with("kind,name,group,n_files,n_systems,stim_r,stim_rmse,sys_r,sys_rmse"));
    let back = EvaluationReport::from_csv(&text).unwrap();
    assert_eq!(back, report);
    let table = report.to_table();
    assert!(table.contains("Average") && table.contains("Worst Case"));
}

#[test]
fn csv_round_trip_keeps_absent_fields() {
    let m = per_system_manifest("p", &[("A", 4.0), ("B", 2.0)], 2);
    let preds: HashMap<String, f64> = m.entries.iter().map(|e| (e.path.clone(), e.mos * 0.9)).collect();
    let report = build_report(&[(&m, "g", &preds)], vec![]).unwrap();
    let back = EvaluationReport::from_csv(&report.to_csv()).unwrap();
    assert_eq!(back, report);
    assert!(EvaluationReport::from_csv("kind,name\n").is_err());
}
