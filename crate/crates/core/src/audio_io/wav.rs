use std::path::Path;

use super::AudioError;

/// Mono waveform in `[-1, 1]` with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidSignal("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(AudioError::InvalidSignal(format!("sample {i} = {} outside [-1, 1]", samples[i])));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Mean power `sum(x^2) / len`.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|&s| f64::from(s) * f64::from(s)).sum::<f64>() / self.samples.len() as f64
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

const WAVE_FORMAT_PCM: u16 = 1;
const WAVE_FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Decodes a 16-bit PCM RIFF/WAVE byte stream (mono or stereo).
pub fn decode_wav(bytes: &[u8]) -> Result<AudioSignal, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::NotWave);
    }
    let mut pos = 12;
    let mut format: Option<(u16, u32)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + size > bytes.len() {
                    return Err(AudioError::Truncated("fmt chunk"));
                }
                let tag = u16_at(bytes, body);
                let channels = u16_at(bytes, body + 2);
                let rate = u32_at(bytes, body + 4);
                let bits = u16_at(bytes, body + 14);
                let pcm = match tag {
                    WAVE_FORMAT_PCM => true,
                    // Extensible: the sub-format GUID starts with the base tag.
                    WAVE_FORMAT_EXTENSIBLE => size >= 40 && u16_at(bytes, body + 24) == WAVE_FORMAT_PCM,
                    _ => false,
                };
                if !pcm {
                    return Err(AudioError::UnsupportedFormat(format!("format tag {tag:#06x} is not PCM")));
                }
                if bits != 16 {
                    return Err(AudioError::UnsupportedFormat(format!("{bits}-bit PCM (only 16-bit is supported)")));
                }
                if channels != 1 && channels != 2 {
                    return Err(AudioError::UnsupportedFormat(format!("{channels} channels")));
                }
                if rate == 0 {
                    return Err(AudioError::UnsupportedFormat("sample rate 0".into()));
                }
                format = Some((channels, rate));
            }
            b"data" => {
                let (channels, rate) = format.ok_or(AudioError::MissingChunk("fmt "))?;
                if body + size > bytes.len() {
                    return Err(AudioError::Truncated("data chunk"));
                }
                let frame_bytes = 2 * channels as usize;
                if !size.is_multiple_of(frame_bytes) {
                    return Err(AudioError::Truncated("data chunk (partial frame)"));
                }
                let data = &bytes[body..body + size];
                let samples = data
                    .chunks_exact(frame_bytes)
                    .map(|frame| {
                        let left = f32::from(i16::from_le_bytes([frame[0], frame[1]])) / 32768.0;
                        if channels == 2 {
                            let right = f32::from(i16::from_le_bytes([frame[2], frame[3]])) / 32768.0;
                            0.5 * (left + right)
                        } else {
                            left
                        }
                    })
                    .collect();
                return AudioSignal::new(samples, rate);
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(AudioError::MissingChunk(if format.is_some() { "data" } else { "fmt " }))
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioSignal, AudioError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| AudioError::io(path, e))?;
    decode_wav(&bytes).map_err(|e| AudioError::File { path: path.to_path_buf(), source: Box::new(e) })
}

/// Quantizes a sample to a 16-bit word; the inverse of the 1/32768 scaling.
pub(crate) fn quantize(x: f32) -> i16 {
    (f64::from(x) * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Encodes a mono 16-bit PCM WAV.
pub fn encode_wav(signal: &AudioSignal) -> Vec<u8> {
    let data_len = 2 * signal.len() as u32;
    let rate = signal.sample_rate();
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&WAVE_FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in signal.samples() {
        out.extend_from_slice(&quantize(s).to_le_bytes());
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, signal: &AudioSignal) -> Result<(), AudioError> {
    let path = path.as_ref();
    std::fs::write(path, encode_wav(signal)).map_err(|e| AudioError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wav_bytes(channels: u16, bits: u16, tag: u16, words: &[i16]) -> Vec<u8> {
        let data: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data.len() as u32).to_le_bytes());
        out.extend_from_slice(b"WAVEfmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&tag.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&16000u32.to_le_bytes());
        out.extend_from_slice(&(16000u32 * u32::from(channels) * u32::from(bits) / 8).to_le_bytes());
        out.extend_from_slice(&(channels * bits / 8).to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(&data);
        out
    }

    #[test]
    fn scales_by_32768() {
        let s = decode_wav(&wav_bytes(1, 16, 1, &[16384, -32768, 0])).unwrap();
        assert_eq!(s.samples(), &[0.5, -1.0, 0.0]);
        assert_eq!(s.sample_rate(), 16000);
    }

    #[test]
    fn stereo_is_averaged() {
        // 0.2 and 0.4 are not exact in 16 bits; compare against the words.
        let (l, r) = (6554i16, 13107i16);
        let s = decode_wav(&wav_bytes(2, 16, 1, &[l, r])).unwrap();
        let want = 0.5 * (f32::from(l) / 32768.0 + f32::from(r) / 32768.0);
        assert_eq!(s.samples(), &[want]);
        assert!((s.samples()[0] - 0.3).abs() < 1e-4);
    }

    #[test]
    fn eight_bit_is_unsupported() {
        let mut bytes = wav_bytes(1, 8, 1, &[0, 0]);
        bytes[34] = 8;
        assert!(matches!(decode_wav(&bytes), Err(AudioError::UnsupportedFormat(_))));
    }

    #[test]
    fn float_format_is_unsupported() {
        let bytes = wav_bytes(1, 16, 3, &[0, 0]);
        assert!(matches!(decode_wav(&bytes), Err(AudioError::UnsupportedFormat(_))));
    }

    #[test]
    fn truncated_data_chunk() {
        let mut bytes = wav_bytes(1, 16, 1, &[1, 2, 3, 4]);
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode_wav(&bytes), Err(AudioError::Truncated(_))));
    }

    #[test]
    fn not_riff() {
        assert!(matches!(decode_wav(b"hello world, not a wav"), Err(AudioError::NotWave)));
    }

    #[test]
    fn skips_unknown_chunks() {
        let plain = wav_bytes(1, 16, 1, &[100, -100]);
        let mut bytes = plain[..36].to_vec();
        bytes.extend_from_slice(b"LIST");
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[1, 2, 3, 0]);
        bytes.extend_from_slice(&plain[36..]);
        let s = decode_wav(&bytes).unwrap();
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn missing_file() {
        let err = read_wav("/definitely/not/here.wav").unwrap_err();
        assert!(matches!(err, AudioError::Io { .. }));
    }

    #[test]
    fn signal_invariants() {
        assert!(AudioSignal::new(vec![1.5], 16000).is_err());
        assert!(AudioSignal::new(vec![f32::NAN], 16000).is_err());
        assert!(AudioSignal::new(vec![0.0], 0).is_err());
        assert_eq!(AudioSignal::new(vec![0.0; 8000], 16000).unwrap().duration_seconds(), 0.5);
    }

    proptest! {
        #[test]
        fn requantizing_reproduces_words(words in proptest::collection::vec(any::<i16>(), 1..200)) {
            let s = decode_wav(&wav_bytes(1, 16, 1, &words)).unwrap();
            let back: Vec<i16> = s.samples().iter().map(|&x| quantize(x)).collect();
            prop_assert_eq!(&back, &words);
            let again = decode_wav(&encode_wav(&s)).unwrap();
            prop_assert_eq!(again, s);
        }
    }
}
