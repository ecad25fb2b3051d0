//! WAV decoding/encoding and dataset manifests.

mod manifest;
mod wav;

pub use manifest::{
    format_mos, load_manifest, validate_manifest, write_manifest, DatasetManifest, LabelLevel, ManifestEntry, Rescale,
    Split, Violation, ViolationKind, MANIFEST_HEADER,
};
pub use wav::{decode_wav, encode_wav, read_wav, write_wav, AudioSignal};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a RIFF/WAVE file")]
    NotWave,
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("truncated {0}")]
    Truncated(&'static str),
    #[error("missing `{0}` chunk")]
    MissingChunk(&'static str),
    #[error("invalid signal: {0}")]
    InvalidSignal(String),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: Box<AudioError> },
    #[error("manifest {path}, line {line}: {message}")]
    ManifestRow { path: PathBuf, line: u64, message: String },
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
}

impl AudioError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}
