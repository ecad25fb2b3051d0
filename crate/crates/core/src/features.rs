//! Mel-spectrogram front-end and segmentation into CNN inputs.
//!
//! Framing is sample-rate adaptive: the window and hop are fixed in
//! milliseconds while the FFT size is fixed in samples, so no resampling is
//! needed. Levels are kept absolute (dB, no per-file normalization).

use std::io::Write;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::AudioSignal;

/// Power floor before log compression.
pub const POWER_FLOOR: f64 = 1e-12;

/// `10 * log10(POWER_FLOOR)`.
pub const DB_FLOOR: f32 = -120.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("signal of {len} samples is shorter than one {window}-sample window")]
    SignalTooShort { len: usize, window: usize },
    #[error("window of {window} samples at {sample_rate} Hz exceeds the FFT size {fft_size}")]
    SampleRateTooHigh { sample_rate: u32, window: usize, fft_size: usize },
    #[error("sample rate {sample_rate} Hz cannot represent fmax {fmax_hz} Hz")]
    SampleRateTooLow { sample_rate: u32, fmax_hz: f64 },
    #[error("invalid feature configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub fft_size: usize,
    pub n_mels: usize,
    pub fmax_hz: f64,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub segment_frames: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { fft_size: 4048, n_mels: 48, fmax_hz: 8000.0, window_ms: 20.0, hop_ms: 10.0, segment_frames: 15 }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: &str| Err(FeatureError::Config(m.to_string()));
        if self.fft_size < 2 {
            return bad("fft_size must be at least 2");
        }
        if self.n_mels == 0 || self.segment_frames == 0 {
            return bad("n_mels and segment_frames must be positive");
        }
        if !(self.fmax_hz > 0.0 && self.window_ms > 0.0 && self.hop_ms > 0.0) {
            return bad("fmax_hz, window_ms and hop_ms must be positive");
        }
        Ok(())
    }

    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_ms * 1e-3 * f64::from(sample_rate)).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        ((self.hop_ms * 1e-3 * f64::from(sample_rate)).round() as usize).max(1)
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn frame_count(&self, len: usize, sample_rate: u32) -> Option<usize> {
        let win = self.window_samples(sample_rate);
        (len >= win && win > 0).then(|| (len - win) / self.hop_samples(sample_rate) + 1)
    }
}

/// One-sided power spectrogram, `n_frames x n_bins`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrogram {
    pub power: Vec<f64>,
    pub n_frames: usize,
    pub n_bins: usize,
}

impl PowerSpectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.power[t * self.n_bins..(t + 1) * self.n_bins]
    }
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect()
}

/// Hann-windowed frames fully inside the signal, each zero-padded to
/// `fft_size` points.
pub fn stft_power(signal: &AudioSignal, cfg: &FeatureConfig) -> Result<PowerSpectrogram, FeatureError> {
    cfg.validate()?;
    let sr = signal.sample_rate();
    let win = cfg.window_samples(sr);
    let hop = cfg.hop_samples(sr);
    if win > cfg.fft_size {
        return Err(FeatureError::SampleRateTooHigh { sample_rate: sr, window: win, fft_size: cfg.fft_size });
    }
    let n_frames = cfg
        .frame_count(signal.len(), sr)
        .ok_or(FeatureError::SignalTooShort { len: signal.len(), window: win })?;
    let n_bins = cfg.n_bins();
    let window = hann_window(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex::default(); cfg.fft_size];
    let mut power = Vec::with_capacity(n_frames * n_bins);
    let x = signal.samples();
    for t in 0..n_frames {
        let start = t * hop;
        buf.iter_mut().for_each(|c| *c = Complex::default());
        for (i, w) in window.iter().enumerate() {
            buf[i] = Complex::new(f64::from(x[start + i]) * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        power.extend(buf[..n_bins].iter().map(|c| c.norm_sqr()));
    }
    Ok(PowerSpectrogram { power, n_frames, n_bins })
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters with unit peaks, `n_mels x n_bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub weights: Vec<f64>,
    pub centers_hz: Vec<f64>,
    pub n_mels: usize,
    pub n_bins: usize,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// `filterbank * power_frame`.
    pub fn apply(&self, frame: &[f64]) -> Vec<f64> {
        (0..self.n_mels)
            .map(|m| {
                let row = self.row(m);
                let mut acc = 0.0;
                for (w, p) in row.iter().zip(frame) {
                    if *w != 0.0 {
                        acc += w * p;
                    }
                }
                acc
            })
            .collect()
    }
}

/// Builds the filterbank. Centers sit at `k * mel(fmax) / n_mels` for
/// `k = 1..=n_mels` (the last center at fmax), each filter rising from the
/// previous center and falling to the next; weights above fmax are zero.
pub fn build_mel_filterbank(sample_rate: u32, cfg: &FeatureConfig) -> Result<MelFilterbank, FeatureError> {
    cfg.validate()?;
    if f64::from(sample_rate) < 2.0 * cfg.fmax_hz {
        return Err(FeatureError::SampleRateTooLow { sample_rate, fmax_hz: cfg.fmax_hz });
    }
    let n_bins = cfg.n_bins();
    let n_mels = cfg.n_mels;
    let step = hz_to_mel(cfg.fmax_hz) / n_mels as f64;
    let edge = |k: usize| mel_to_hz(k as f64 * step);
    let centers_hz: Vec<f64> = (1..=n_mels).map(edge).collect();
    let bin_hz = f64::from(sample_rate) / cfg.fft_size as f64;
    let mut weights = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (lo, c, hi) = (edge(m), edge(m + 1), edge(m + 2));
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            if f > cfg.fmax_hz {
                break;
            }
            let w = if f > lo && f <= c {
                (f - lo) / (c - lo)
            } else if f > c && f < hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
            weights[m * n_bins + k] = w;
        }
    }
    Ok(MelFilterbank { weights, centers_hz, n_mels, n_bins })
}

/// Log-mel frames, `n_frames x n_mels`, in dB.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Vec<f32>,
    pub n_frames: usize,
    pub n_mels: usize,
    pub frame_hop_s: f64,
    pub source_sample_rate: u32,
}

impl MelSpectrogram {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in 0..self.n_frames {
            let row: Vec<String> = self.frame(t).iter().map(|v| format!("{v:.4}")).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        out.flush()
    }
}

pub fn compute_mel_spectrogram(signal: &AudioSignal, cfg: &FeatureConfig) -> Result<MelSpectrogram, FeatureError> {
    let power = stft_power(signal, cfg)?;
    let bank = build_mel_filterbank(signal.sample_rate(), cfg)?;
    let mut frames = Vec::with_capacity(power.n_frames * cfg.n_mels);
    for t in 0..power.n_frames {
        frames.extend(bank.apply(power.frame(t)).into_iter().map(|e| (10.0 * e.max(POWER_FLOOR).log10()) as f32));
    }
    Ok(MelSpectrogram {
        frames,
        n_frames: power.n_frames,
        n_mels: cfg.n_mels,
        frame_hop_s: cfg.hop_samples(signal.sample_rate()) as f64 / f64::from(signal.sample_rate()),
        source_sample_rate: signal.sample_rate(),
    })
}

/// CNN input sequence, `n x 1 x n_mels x frames`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSequence {
    pub data: Vec<f32>,
    pub n: usize,
    pub n_mels: usize,
    pub frames: usize,
}

impl SegmentSequence {
    pub fn shape(&self) -> [usize; 4] {
        [self.n, 1, self.n_mels, self.frames]
    }

    pub fn segment(&self, i: usize) -> &[f32] {
        let size = self.n_mels * self.frames;
        &self.data[i * size..(i + 1) * size]
    }

    /// Value of band `m`, column `j` of segment `i`.
    pub fn at(&self, i: usize, m: usize, j: usize) -> f32 {
        self.data[(i * self.n_mels + m) * self.frames + j]
    }
}

/// Slides a `segment_frames`-wide window with a hop of one frame. Short
/// spectrograms are right-padded with the dB floor to a single segment.
pub fn segment_spectrogram(mel: &MelSpectrogram, segment_frames: usize) -> SegmentSequence {
    let w = segment_frames.max(1);
    let n = if mel.n_frames >= w { mel.n_frames - w + 1 } else { 1 };
    let mut data = vec![DB_FLOOR; n * mel.n_mels * w];
    for i in 0..n {
        for j in 0..w {
            let t = i + j;
            if t >= mel.n_frames {
                continue;
            }
            let frame = mel.frame(t);
            for (m, &v) in frame.iter().enumerate() {
                data[(i * mel.n_mels + m) * w + j] = v;
            }
        }
    }
    SegmentSequence { data, n, n_mels: mel.n_mels, frames: w }
}

/// WAV samples to CNN input in one call.
pub fn extract_segments(signal: &AudioSignal, cfg: &FeatureConfig) -> Result<SegmentSequence, FeatureError> {
    let mel = compute_mel_spectrogram(signal, cfg)?;
    Ok(segment_spectrogram(&mel, cfg.segment_frames))
}
