use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{read_wav, AudioError};

pub const MANIFEST_HEADER: [&str; 7] = ["path", "dataset_id", "system_id", "mos", "num_votes", "label_level", "split"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelLevel {
    /// One rating mean per file.
    PerStimulus,
    /// Every file carries the MOS of its system.
    PerSystem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl FromStr for LabelLevel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "per_stimulus" => Ok(Self::PerStimulus),
            "per_system" => Ok(Self::PerSystem),
            other => Err(format!("unknown label_level `{other}` (expected per_stimulus or per_system)")),
        }
    }
}

impl fmt::Display for LabelLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PerStimulus => "per_stimulus",
            Self::PerSystem => "per_system",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "validation" => Ok(Self::Validation),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown split `{other}` (expected train, validation or test)")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Validation => "validation",
            Self::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// File reference as written in the manifest; relative paths resolve
    /// against the manifest's directory.
    pub path: String,
    pub dataset_id: String,
    pub system_id: String,
    pub mos: f64,
    pub num_votes: u32,
    pub label_level: LabelLevel,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub source_path: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, source_path: impl Into<PathBuf>) -> Self {
        Self { entries, source_path: source_path.into() }
    }

    /// Filesystem location of an entry's audio.
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            return p.to_path_buf();
        }
        match self.source_path.parent() {
            Some(dir) => dir.join(p),
            None => p.to_path_buf(),
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Manifest restricted to one split, keeping the source path.
    pub fn filtered(&self, split: Split) -> DatasetManifest {
        DatasetManifest { entries: self.split(split).cloned().collect(), source_path: self.source_path.clone() }
    }
}

/// Linear map of a raw rating scale `[lo, hi]` onto MOS `[1, 5]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rescale {
    pub lo: f64,
    pub hi: f64,
}

impl Rescale {
    pub fn new(lo: f64, hi: f64) -> Result<Self, String> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(format!("rescale range ({lo}, {hi}) must satisfy lo < hi"));
        }
        Ok(Self { lo, hi })
    }

    pub fn apply(&self, x: f64) -> f64 {
        1.0 + 4.0 * (x - self.lo) / (self.hi - self.lo)
    }
}

/// Formats a MOS with at least four decimals and exact round trip.
pub fn format_mos(mos: f64) -> String {
    let fixed = format!("{mos:.4}");
    if fixed.parse::<f64>().ok() == Some(mos) {
        fixed
    } else {
        format!("{mos}")
    }
}

pub fn load_manifest(path: impl AsRef<Path>, rescale: Option<Rescale>) -> Result<DatasetManifest, AudioError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| AudioError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let manifest_err = |message: String| AudioError::Manifest { path: path.to_path_buf(), message };
    let headers = reader.headers().map_err(|e| manifest_err(e.to_string()))?.clone();
    if headers.iter().ne(MANIFEST_HEADER.iter().copied()) {
        return Err(manifest_err(format!(
            "header must be `{}`, found `{}`",
            MANIFEST_HEADER.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            AudioError::ManifestRow { path: path.to_path_buf(), line, message: e.to_string() }
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let row_err = |message: String| AudioError::ManifestRow { path: path.to_path_buf(), line, message };
        if record.len() != MANIFEST_HEADER.len() {
            return Err(row_err(format!("expected {} fields, found {}", MANIFEST_HEADER.len(), record.len())));
        }
        let raw: f64 = record[3].parse().map_err(|_| row_err(format!("mos `{}` is not a number", &record[3])))?;
        let mos = rescale.map_or(raw, |r| r.apply(raw));
        if !(1.0..=5.0).contains(&mos) {
            return Err(row_err(format!("mos {mos} outside [1, 5]")));
        }
        let num_votes = record[4].parse().map_err(|_| row_err(format!("num_votes `{}` is not a non-negative integer", &record[4])))?;
        let label_level = record[5].parse().map_err(row_err)?;
        let split = record[6].parse().map_err(row_err)?;
        if record[0].is_empty() {
            return Err(row_err("empty path".into()));
        }
        if !seen.insert(record[0].to_string()) {
            return Err(row_err(format!("duplicate path `{}`", &record[0])));
        }
        entries.push(ManifestEntry {
            path: record[0].to_string(),
            dataset_id: record[1].to_string(),
            system_id: record[2].to_string(),
            mos,
            num_votes,
            label_level,
            split,
        });
    }
    Ok(DatasetManifest { entries, source_path: path.to_path_buf() })
}

pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<(), AudioError> {
    let path = path.as_ref();
    let io = |e: csv::Error| AudioError::Manifest { path: path.to_path_buf(), message: e.to_string() };
    let mut writer = csv::Writer::from_path(path).map_err(io)?;
    writer.write_record(MANIFEST_HEADER).map_err(io)?;
    for e in entries {
        writer
            .write_record([
                e.path.as_str(),
                &e.dataset_id,
                &e.system_id,
                &format_mos(e.mos),
                &e.num_votes.to_string(),
                &e.label_level.to_string(),
                &e.split.to_string(),
            ])
            .map_err(io)?;
    }
    writer.flush().map_err(|e| AudioError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    MosRange,
    DuplicatePath,
    InconsistentSystemMos,
    MissingFile,
    Undecodable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub path: Option<String>,
    pub message: String,
}

/// Lists every broken invariant; an empty list means the manifest is usable.
pub fn validate_manifest(manifest: &DatasetManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut system_mos: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    for e in &manifest.entries {
        if !(1.0..=5.0).contains(&e.mos) {
            out.push(Violation {
                kind: ViolationKind::MosRange,
                path: Some(e.path.clone()),
                message: format!("mos {} outside [1, 5]", e.mos),
            });
        }
        if !seen.insert(e.path.as_str()) {
            out.push(Violation {
                kind: ViolationKind::DuplicatePath,
                path: Some(e.path.clone()),
                message: "path listed more than once".into(),
            });
        }
        if e.label_level == LabelLevel::PerSystem {
            system_mos.entry((&e.dataset_id, &e.system_id)).or_default().push(e.mos);
        }
        let resolved = manifest.resolve(e);
        if !resolved.is_file() {
            out.push(Violation {
                kind: ViolationKind::MissingFile,
                path: Some(e.path.clone()),
                message: format!("{} does not exist", resolved.display()),
            });
        } else if let Err(err) = read_wav(&resolved) {
            out.push(Violation { kind: ViolationKind::Undecodable, path: Some(e.path.clone()), message: err.to_string() });
        }
    }
    for ((dataset, system), values) in system_mos {
        if values.iter().any(|&v| v != values[0]) {
            out.push(Violation {
                kind: ViolationKind::InconsistentSystemMos,
                path: None,
                message: format!("per_system entries of {dataset}/{system} disagree on mos: {values:?}"),
            });
        }
    }
    out
}
