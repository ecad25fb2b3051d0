//! Small synthetic corpora: harmonic tones in white noise, with the noise
//! level tied to the label so that a model has something to learn.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::audio_io::{write_manifest, write_wav, AudioError, AudioSignal, DatasetManifest, LabelLevel, ManifestEntry, Split};
use crate::rng;

/// Harmonic tone (f0 in 100-300 Hz, five harmonics) plus white noise at
/// `snr_db`, peak-limited to 0.9.
pub fn tone_in_noise(sample_rate: u32, seconds: f64, snr_db: f64, rng: &mut impl Rng) -> AudioSignal {
    let n = (seconds * f64::from(sample_rate)).round() as usize;
    let f0 = rng.gen_range(100.0..300.0);
    let phases: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let tone: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / f64::from(sample_rate);
            (1..=5).map(|h| (std::f64::consts::TAU * f0 * h as f64 * t + phases[h - 1]).sin() / h as f64).sum()
        })
        .collect();
    let power = tone.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64;
    let sigma = (power * 10f64.powf(-snr_db / 10.0)).sqrt();
    let noise = Normal::new(0.0, sigma.max(1e-12)).expect("valid sigma");
    let mixed: Vec<f64> = tone.iter().map(|v| v + noise.sample(rng)).collect();
    let peak = mixed.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    AudioSignal::new(mixed.iter().map(|v| (0.9 * v / peak) as f32).collect(), sample_rate).expect("in range")
}

/// SNR used for a label in `[1, 5]`: -5 dB at 1, 25 dB at 5.
pub fn snr_for_label(label: f64) -> f64 {
    -5.0 + 7.5 * (label - 1.0)
}

/// Layout of a synthetic labelled set.
#[derive(Debug, Clone)]
pub struct ToySetSpec {
    pub dataset_id: String,
    pub n_files: usize,
    pub n_systems: usize,
    pub seconds: f64,
    pub sample_rate: u32,
    pub label_level: LabelLevel,
    /// Every `k`-th file (k > 0) goes to validation; 0 keeps all in train.
    pub validation_every: usize,
    pub seed: u64,
}

impl Default for ToySetSpec {
    fn default() -> Self {
        Self {
            dataset_id: "toy".into(),
            n_files: 20,
            n_systems: 5,
            seconds: 0.25,
            sample_rate: 16000,
            label_level: LabelLevel::PerStimulus,
            validation_every: 0,
            seed: rng::DEFAULT_SEED,
        }
    }
}

/// Writes `n_files` WAVs with labels evenly spread over `[1, 5]` plus
/// `manifest.csv` into `dir`. File `i` belongs to system `i % n_systems`;
/// with per-system labels every file carries its system's mean label.
pub fn write_toy_set(dir: impl AsRef<Path>, spec: &ToySetSpec) -> Result<DatasetManifest, AudioError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| AudioError::Io { path: dir.to_path_buf(), source: e })?;
    let n = spec.n_files;
    let labels: Vec<f64> = (0..n).map(|i| if n > 1 { 1.0 + 4.0 * i as f64 / (n - 1) as f64 } else { 3.0 }).collect();
    let systems = spec.n_systems.max(1);
    let mut entries = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let mut r = rng::stream(spec.seed, "toy-set", i as u64);
        let signal = tone_in_noise(spec.sample_rate, spec.seconds, snr_for_label(label), &mut r);
        let name = format!("{}_{i:03}.wav", spec.dataset_id);
        write_wav(dir.join(&name), &signal)?;
        let system = i % systems;
        let mos = match spec.label_level {
            LabelLevel::PerStimulus => label,
            LabelLevel::PerSystem => {
                let members: Vec<f64> = labels.iter().enumerate().filter(|(j, _)| j % systems == system).map(|(_, l)| *l).collect();
                members.iter().sum::<f64>() / members.len() as f64
            }
        };
        let split = if spec.validation_every > 0 && i % spec.validation_every == spec.validation_every - 1 {
            Split::Validation
        } else {
            Split::Train
        };
        entries.push(ManifestEntry {
            path: name,
            dataset_id: spec.dataset_id.clone(),
            system_id: format!("sys{system:02}"),
            mos: (mos * 1e4).round() / 1e4,
            num_votes: 10,
            label_level: spec.label_level,
            split,
        });
    }
    let path = dir.join("manifest.csv");
    write_manifest(&entries, &path)?;
    Ok(DatasetManifest::new(entries, path))
}

/// Writes `n` clean references (tones at 30 dB SNR) named `ref_XXX.wav`.
pub fn write_references(dir: impl AsRef<Path>, n: usize, seconds: f64, seed: u64) -> Result<(), AudioError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| AudioError::Io { path: dir.to_path_buf(), source: e })?;
    for i in 0..n {
        let mut r = rng::stream(seed, "references", i as u64);
        write_wav(dir.join(format!("ref_{i:03}.wav")), &tone_in_noise(16000, seconds, 30.0, &mut r))?;
    }
    Ok(())
}
