//! Independent reference implementations and fixtures shared by the
//! integration tests.
#![allow(dead_code)]

use naturalmos::audio_io::{DatasetManifest, LabelLevel, ManifestEntry, Split};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::{BTreeMap, HashMap};

/// Raw-moment correlation: (nΣxy − ΣxΣy) / sqrt((nΣx² − (Σx)²)(nΣy² − (Σy)²)).
pub fn direct_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt()
}

pub fn direct_rmse(p: &[f64], t: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.len() {
        acc += (p[i] - t[i]).powi(2);
    }
    (acc / p.len() as f64).sqrt()
}

/// Means per system of (prediction, label), in system-name order.
pub fn direct_system_means(rows: &[(String, f64, f64)]) -> (Vec<f64>, Vec<f64>) {
    let mut g: BTreeMap<&str, (f64, f64, f64)> = BTreeMap::new();
    for (s, p, m) in rows {
        let e = g.entry(s).or_insert((0.0, 0.0, 0.0));
        e.0 += p;
        e.1 += m;
        e.2 += 1.0;
    }
    g.values().map(|(p, m, n)| (p / n, m / n)).unzip()
}

pub fn entry(path: &str, dataset: &str, system: &str, mos: f64, level: LabelLevel) -> ManifestEntry {
    ManifestEntry {
        path: path.to_string(),
        dataset_id: dataset.to_string(),
        system_id: system.to_string(),
        mos,
        num_votes: 8,
        label_level: level,
        split: Split::Test,
    }
}

/// `systems` × `files` stimuli whose true quality is the system's level;
/// predictions equal the true quality, labels add N(0, σ²) per file.
/// Returns the manifest and the prediction map.
pub fn noisy_label_dataset(
    dataset: &str,
    systems: usize,
    files: usize,
    sigma: f64,
    rng: &mut impl Rng,
) -> (DatasetManifest, HashMap<String, f64>) {
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut entries = Vec::new();
    let mut preds = HashMap::new();
    for s in 0..systems {
        let quality = 1.5 + 3.0 * s as f64 / (systems - 1) as f64;
        for f in 0..files {
            let path = format!("{dataset}/s{s:02}_{f:03}.wav");
            let mos = quality + noise.sample(rng);
            entries.push(entry(&path, dataset, &format!("sys{s:02}"), mos, LabelLevel::PerStimulus));
            preds.insert(path, quality + 0.05 * rng.gen_range(-1.0..1.0));
        }
    }
    (DatasetManifest::new(entries, format!("{dataset}/manifest.csv")), preds)
}
