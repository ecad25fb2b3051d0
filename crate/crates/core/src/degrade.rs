//! Simulated degradations and the proxy-labelled pretraining corpus.
//!
//! Each degradation has a severity in `[0, 1]` (0 leaves the signal
//! unchanged) and the proxy label is the affine map `4.8 - 3.8 * severity`.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio_io::{
    read_wav, write_manifest, write_wav, AudioError, AudioSignal, DatasetManifest, LabelLevel, ManifestEntry, Split,
};
use crate::rng;

/// SNR at which white noise reaches severity 0.
pub const NOISE_SNR_RANGE_DB: f64 = 40.0;
pub const FRAME_MS: f64 = 20.0;
pub const BAND_FILTER_TAPS: usize = 801;
pub const CHAIN_PROBABILITY: f64 = 0.25;
pub const PRETRAIN_DATASET: &str = "pretrain";
pub const CORPUS_MANIFEST: &str = "manifest.csv";

#[derive(Debug, Error)]
pub enum DegradeError {
    #[error("white noise needs a signal with non-zero power")]
    SilentInput,
    #[error("invalid degradation parameter: {0}")]
    Parameter(String),
    #[error("severity {0} outside [0, 1]")]
    Severity(f64),
    #[error("no .wav files in {0}")]
    NoReferences(PathBuf),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DegradationKind {
    WhiteNoise,
    AmplitudeClip,
    TimeClip,
    PacketLoss,
    BandFilter,
    Chain,
}

impl DegradationKind {
    pub const BASE: [Self; 5] = [Self::WhiteNoise, Self::AmplitudeClip, Self::TimeClip, Self::PacketLoss, Self::BandFilter];

    pub fn name(self) -> &'static str {
        match self {
            Self::WhiteNoise => "white_noise",
            Self::AmplitudeClip => "amplitude_clip",
            Self::TimeClip => "time_clip",
            Self::PacketLoss => "packet_loss",
            Self::BandFilter => "band_filter",
            Self::Chain => "chain",
        }
    }
}

/// A parameterized degradation.
#[derive(Debug, Clone, PartialEq)]
pub enum Degradation {
    /// Infinite SNR adds nothing.
    WhiteNoise { snr_db: f64 },
    AmplitudeClip { threshold: f64 },
    TimeClip { fraction: f64 },
    PacketLoss { loss_rate: f64 },
    /// Pass band as fractions of the Nyquist frequency.
    BandFilter { low: f64, high: f64 },
    /// Applied in order.
    Chain(Vec<Degradation>),
}

impl Degradation {
    pub fn kind(&self) -> DegradationKind {
        match self {
            Self::WhiteNoise { .. } => DegradationKind::WhiteNoise,
            Self::AmplitudeClip { .. } => DegradationKind::AmplitudeClip,
            Self::TimeClip { .. } => DegradationKind::TimeClip,
            Self::PacketLoss { .. } => DegradationKind::PacketLoss,
            Self::BandFilter { .. } => DegradationKind::BandFilter,
            Self::Chain(_) => DegradationKind::Chain,
        }
    }

    /// Severity in `[0, 1]`, increasing with the amount of distortion.
    pub fn severity(&self) -> f64 {
        let s = match self {
            Self::WhiteNoise { snr_db } => (NOISE_SNR_RANGE_DB - snr_db) / NOISE_SNR_RANGE_DB,
            Self::AmplitudeClip { threshold } => 1.0 - threshold,
            Self::TimeClip { fraction } => *fraction,
            Self::PacketLoss { loss_rate } => *loss_rate,
            Self::BandFilter { low, high } => 1.0 - (high - low),
            Self::Chain(parts) => 1.0 - parts.iter().map(|p| 1.0 - p.severity()).product::<f64>(),
        };
        s.clamp(0.0, 1.0)
    }

    /// Base degradation of `kind` at severity `s`. Band filters place their
    /// pass band uniformly at random; severity 0 is the identity for every
    /// kind.
    pub fn from_severity(kind: DegradationKind, s: f64, rng: &mut impl Rng) -> Result<Self, DegradeError> {
        if !(0.0..=1.0).contains(&s) {
            return Err(DegradeError::Severity(s));
        }
        Ok(match kind {
            DegradationKind::WhiteNoise => {
                Self::WhiteNoise { snr_db: if s == 0.0 { f64::INFINITY } else { NOISE_SNR_RANGE_DB * (1.0 - s) } }
            }
            DegradationKind::AmplitudeClip => Self::AmplitudeClip { threshold: 1.0 - s },
            DegradationKind::TimeClip => Self::TimeClip { fraction: s },
            DegradationKind::PacketLoss => Self::PacketLoss { loss_rate: s },
            DegradationKind::BandFilter => {
                let width = 1.0 - s;
                let low = rng.gen::<f64>() * s;
                Self::BandFilter { low, high: low + width }
            }
            DegradationKind::Chain => return Err(DegradeError::Parameter("chains are built from base kinds".into())),
        })
    }
}

/// Affine proxy label: 4.8 at severity 0, 1.0 at severity 1.
pub fn severity_to_proxy_mos(severity: f64) -> Result<f64, DegradeError> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(DegradeError::Severity(severity));
    }
    Ok(4.8 - 3.8 * severity)
}

fn rebuild(samples: Vec<f32>, sr: u32) -> Result<AudioSignal, DegradeError> {
    Ok(AudioSignal::new(samples, sr)?)
}

fn frame_len(sr: u32) -> usize {
    ((FRAME_MS * 1e-3 * f64::from(sr)).round() as usize).max(1)
}

/// Adds Gaussian noise at `snr_db` relative to `reference_power`.
fn add_noise(signal: &AudioSignal, snr_db: f64, reference_power: f64, rng: &mut impl Rng) -> Result<AudioSignal, DegradeError> {
    if reference_power <= 0.0 {
        return Err(DegradeError::SilentInput);
    }
    if snr_db.is_infinite() && snr_db > 0.0 {
        return Ok(signal.clone());
    }
    if snr_db.is_nan() {
        return Err(DegradeError::Parameter("snr_db is NaN".into()));
    }
    let sigma = (reference_power * 10f64.powf(-snr_db / 10.0)).sqrt();
    let normal = Normal::new(0.0, sigma).map_err(|e| DegradeError::Parameter(e.to_string()))?;
    let out = signal
        .samples()
        .iter()
        .map(|&x| (f64::from(x) + normal.sample(rng)).clamp(-1.0, 1.0) as f32)
        .collect();
    rebuild(out, signal.sample_rate())
}

/// Gaussian noise with power `P_signal * 10^(-snr_db / 10)`, then clipped
/// to `[-1, 1]`.
pub fn add_white_noise(signal: &AudioSignal, snr_db: f64, rng: &mut impl Rng) -> Result<AudioSignal, DegradeError> {
    add_noise(signal, snr_db, signal.power(), rng)
}

pub fn amplitude_clip(signal: &AudioSignal, threshold: f64) -> Result<AudioSignal, DegradeError> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(DegradeError::Parameter(format!("clip threshold {threshold} must be positive")));
    }
    let t = threshold.min(1.0) as f32;
    rebuild(signal.samples().iter().map(|x| x.clamp(-t, t)).collect(), signal.sample_rate())
}

/// Zeroes `round(fraction * W)` distinct 20 ms windows chosen at random,
/// where `W` is the number of whole windows in the signal.
pub fn time_clip(signal: &AudioSignal, fraction: f64, rng: &mut impl Rng) -> Result<AudioSignal, DegradeError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(DegradeError::Parameter(format!("time-clip fraction {fraction} outside [0, 1]")));
    }
    let win = frame_len(signal.sample_rate());
    let windows = signal.len() / win;
    let k = ((fraction * windows as f64).round() as usize).min(windows);
    let mut out = signal.samples().to_vec();
    for w in sample(rng, windows, k) {
        out[w * win..(w + 1) * win].iter_mut().for_each(|v| *v = 0.0);
    }
    rebuild(out, signal.sample_rate())
}

/// Drops each 20 ms frame (including a partial last frame) with
/// probability `loss_rate`, replacing it with zeros.
pub fn packet_loss_zero_fill(signal: &AudioSignal, loss_rate: f64, rng: &mut impl Rng) -> Result<AudioSignal, DegradeError> {
    if !(0.0..=1.0).contains(&loss_rate) {
        return Err(DegradeError::Parameter(format!("loss rate {loss_rate} outside [0, 1]")));
    }
    let win = frame_len(signal.sample_rate());
    let mut out = signal.samples().to_vec();
    for frame in out.chunks_mut(win) {
        if rng.gen::<f64>() < loss_rate {
            frame.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    rebuild(out, signal.sample_rate())
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
    }
}

/// Hann-windowed sinc band-pass taps for `[low_hz, high_hz]`.
pub fn band_pass_taps(low_hz: f64, high_hz: f64, sample_rate: u32, taps: usize) -> Vec<f64> {
    let fs = f64::from(sample_rate);
    let (fl, fh) = (low_hz / fs, high_hz / fs);
    let m = (taps - 1) as f64 / 2.0;
    (0..taps)
        .map(|n| {
            let t = n as f64 - m;
            let ideal = 2.0 * fh * sinc(2.0 * fh * t) - 2.0 * fl * sinc(2.0 * fl * t);
            let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (taps - 1) as f64).cos();
            ideal * w
        })
        .collect()
}

/// Linear-phase FIR band-pass (801 taps) with the group delay removed.
/// The signal is extended by odd reflection at both ends so that the filter
/// sees no artificial onset.
pub fn band_filter(signal: &AudioSignal, low_hz: f64, high_hz: f64) -> Result<AudioSignal, DegradeError> {
    let nyq = f64::from(signal.sample_rate()) / 2.0;
    if !(low_hz >= 0.0 && low_hz < high_hz && high_hz <= nyq) {
        return Err(DegradeError::Parameter(format!("band [{low_hz}, {high_hz}] Hz invalid for Nyquist {nyq} Hz")));
    }
    let h = band_pass_taps(low_hz, high_hz, signal.sample_rate(), BAND_FILTER_TAPS);
    let half = BAND_FILTER_TAPS / 2;
    let x = signal.samples();
    let n = x.len();
    if n == 0 {
        return Ok(signal.clone());
    }
    let last = n as isize - 1;
    let at = |i: isize| -> f64 {
        // Odd reflection about the end samples, clamped for very short input.
        let (first, end) = (f64::from(x[0]), f64::from(x[n - 1]));
        if i < 0 {
            2.0 * first - f64::from(x[(-i).min(last) as usize])
        } else if i > last {
            2.0 * end - f64::from(x[(2 * last - i).max(0) as usize])
        } else {
            f64::from(x[i as usize])
        }
    };
    let out = (0..n as isize)
        .map(|t| {
            let acc: f64 = h.iter().enumerate().map(|(k, &hk)| hk * at(t + half as isize - k as isize)).sum();
            acc.clamp(-1.0, 1.0) as f32
        })
        .collect();
    rebuild(out, signal.sample_rate())
}

fn apply_with_reference(
    signal: &AudioSignal,
    spec: &Degradation,
    reference_power: f64,
    rng: &mut impl Rng,
) -> Result<AudioSignal, DegradeError> {
    match spec {
        Degradation::WhiteNoise { snr_db } => add_noise(signal, *snr_db, reference_power, rng),
        Degradation::AmplitudeClip { threshold } => amplitude_clip(signal, *threshold),
        Degradation::TimeClip { fraction } => time_clip(signal, *fraction, rng),
        Degradation::PacketLoss { loss_rate } => packet_loss_zero_fill(signal, *loss_rate, rng),
        Degradation::BandFilter { low, high } => {
            if *low <= 0.0 && *high >= 1.0 {
                return Ok(signal.clone());
            }
            let nyq = f64::from(signal.sample_rate()) / 2.0;
            band_filter(signal, low * nyq, (high * nyq).min(nyq))
        }
        Degradation::Chain(parts) => {
            let mut out = signal.clone();
            for p in parts {
                out = apply_with_reference(&out, p, reference_power, rng)?;
            }
            Ok(out)
        }
    }
}

/// Applies `spec`. Inside chains, white-noise levels refer to the power of
/// the chain's input, so a preceding dropout cannot make the SNR undefined.
pub fn apply_degradation(signal: &AudioSignal, spec: &Degradation, rng: &mut impl Rng) -> Result<AudioSignal, DegradeError> {
    apply_with_reference(signal, spec, signal.power(), rng)
}

/// Draws one corpus condition: with probability 0.25 a chain of two base
/// kinds, otherwise a single base kind, both uniform. The overall severity
/// is uniform on `[0, 1)`; for chains it is split between the two parts
/// so that `1 - (1 - s1)(1 - s2)` equals the drawn value.
pub fn sample_condition(rng: &mut impl Rng) -> Result<Degradation, DegradeError> {
    let s: f64 = rng.gen();
    let pick = |rng: &mut dyn rand::RngCore| DegradationKind::BASE[rng.gen_range(0..DegradationKind::BASE.len())];
    if rng.gen::<f64>() < CHAIN_PROBABILITY {
        let (a, b) = (pick(rng), pick(rng));
        let u: f64 = rng.gen();
        let keep = 1.0 - s;
        let s1 = 1.0 - keep.powf(u);
        let s2 = 1.0 - keep.powf(1.0 - u);
        Ok(Degradation::Chain(vec![Degradation::from_severity(a, s1, rng)?, Degradation::from_severity(b, s2, rng)?]))
    } else {
        Degradation::from_severity(pick(rng), s, rng)
    }
}

/// Deterministic 90/10 train/validation assignment from the file name.
pub fn split_for(file_name: &str) -> Split {
    let hash = Sha256::digest(file_name.as_bytes());
    let v = u64::from_le_bytes(hash[..8].try_into().expect("8 bytes"));
    if v % 10 == 0 {
        Split::Validation
    } else {
        Split::Train
    }
}

fn reference_files(dir: &Path) -> Result<Vec<PathBuf>, DegradeError> {
    let entries = std::fs::read_dir(dir).map_err(|e| AudioError::Io { path: dir.to_path_buf(), source: e })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(DegradeError::NoReferences(dir.to_path_buf()));
    }
    Ok(files)
}

/// Degrades every clean WAV in `reference_dir` under
/// `conditions_per_file` sampled conditions, writes the results and
/// `manifest.csv` into `out_dir`, and returns the manifest.
///
/// Output `j` of reference `i` draws from its own random stream, so the
/// result does not depend on scheduling.
pub fn generate_pretrain_corpus(
    reference_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    conditions_per_file: usize,
    seed: u64,
) -> Result<DatasetManifest, DegradeError> {
    let refs = reference_files(reference_dir.as_ref())?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| AudioError::Io { path: out_dir.to_path_buf(), source: e })?;
    let per_ref: Vec<Vec<ManifestEntry>> = refs
        .par_iter()
        .enumerate()
        .map(|(i, path)| {
            let clean = read_wav(path)?;
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            (0..conditions_per_file)
                .map(|j| {
                    let mut r = rng::stream(seed, "corpus", (i * conditions_per_file + j) as u64);
                    let spec = sample_condition(&mut r)?;
                    let degraded = apply_degradation(&clean, &spec, &mut r)?;
                    let name = format!("{stem}_c{j:02}_{}.wav", spec.kind().name());
                    write_wav(out_dir.join(&name), &degraded)?;
                    Ok(ManifestEntry {
                        split: split_for(&name),
                        path: name,
                        dataset_id: PRETRAIN_DATASET.to_string(),
                        system_id: spec.kind().name().to_string(),
                        mos: severity_to_proxy_mos(spec.severity())?,
                        num_votes: 0,
                        label_level: LabelLevel::PerStimulus,
                    })
                })
                .collect()
        })
        .collect::<Result<_, DegradeError>>()?;
    let manifest_path = out_dir.join(CORPUS_MANIFEST);
    let entries: Vec<ManifestEntry> = per_ref.into_iter().flatten().collect();
    write_manifest(&entries, &manifest_path)?;
    Ok(DatasetManifest::new(entries, manifest_path))
}
