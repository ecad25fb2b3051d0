//! Layered `key = value` configuration: flag > file > environment > default.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use naturalmos::features::FeatureConfig;
use naturalmos::training::TrainConfig;

pub const SEED_ENV: &str = "NATURALMOS_SEED";

/// Every accepted key, in echo order.
pub const KEYS: [&str; 13] = [
    "lr",
    "pretrain_epochs",
    "finetune_max_epochs",
    "early_stop_patience",
    "batch_size",
    "runs",
    "seed",
    "fft_size",
    "n_mels",
    "fmax_hz",
    "window_ms",
    "hop_ms",
    "segment_frames",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Default,
    Env,
    File,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Default => "default",
            Self::Env => "env",
            Self::File => "file",
            Self::Flag => "flag",
        })
    }
}

/// Resolved settings with the layer each value came from.
#[derive(Debug, Clone)]
pub struct Settings {
    values: BTreeMap<&'static str, (String, Source)>,
}

fn key(name: &str) -> Result<&'static str> {
    KEYS.iter().copied().find(|k| *k == name).ok_or_else(|| anyhow!("unknown configuration key `{name}`"))
}

/// Parses a flat `key = value` file; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(&'static str, String)>> {
    let mut out: Vec<(&'static str, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected `key = value`", i + 1))?;
        let k = key(k.trim()).with_context(|| format!("line {}", i + 1))?;
        if out.iter().any(|(seen, _)| *seen == k) {
            bail!("line {}: duplicate key `{k}`", i + 1);
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

/// `key=value` from a `--set` flag.
pub fn parse_assignment(s: &str) -> Result<(&'static str, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("`--set {s}`: expected key=value"))?;
    Ok((key(k.trim())?, v.trim().to_string()))
}

impl Settings {
    pub fn resolve(file: Option<&Path>, env_seed: Option<String>, flags: &[(&'static str, String)]) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (k, v) in defaults() {
            values.insert(k, (v, Source::Default));
        }
        if let Some(seed) = env_seed {
            values.insert("seed", (seed, Source::Env));
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            for (k, v) in parse_config_text(&text).with_context(|| path.display().to_string())? {
                values.insert(k, (v, Source::File));
            }
        }
        for (k, v) in flags {
            values.insert(k, (v.clone(), Source::Flag));
        }
        let s = Self { values };
        s.train()?;
        s.features()?;
        Ok(s)
    }

    fn get<T: std::str::FromStr>(&self, k: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let (v, src) = &self.values[k];
        v.parse().map_err(|e| anyhow!("{k} = `{v}` ({src}): {e}"))
    }

    pub fn source(&self, k: &str) -> Source {
        self.values[k].1
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let c = TrainConfig {
            lr: self.get("lr")?,
            pretrain_epochs: self.get("pretrain_epochs")?,
            finetune_max_epochs: self.get("finetune_max_epochs")?,
            early_stop_patience: self.get("early_stop_patience")?,
            batch_size: self.get("batch_size")?,
            runs: self.get("runs")?,
            seed: self.get("seed")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn features(&self) -> Result<FeatureConfig> {
        let f = FeatureConfig {
            fft_size: self.get("fft_size")?,
            n_mels: self.get("n_mels")?,
            fmax_hz: self.get("fmax_hz")?,
            window_ms: self.get("window_ms")?,
            hop_ms: self.get("hop_ms")?,
            segment_frames: self.get("segment_frames")?,
        };
        f.validate()?;
        Ok(f)
    }

    /// Whether any feature key was set away from its default.
    pub fn features_overridden(&self) -> bool {
        KEYS[7..].iter().any(|k| self.source(k) != Source::Default)
    }

    /// Effective values in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(String, String)> {
        KEYS.iter().map(|k| (k.to_string(), self.values[k].0.clone())).collect()
    }
}

fn defaults() -> Vec<(&'static str, String)> {
    let t = TrainConfig::default();
    let f = FeatureConfig::default();
    let mut v: Vec<(&'static str, String)> = Vec::new();
    for (k, val) in t.entries() {
        v.push((key(&k).expect("train keys are listed"), val));
    }
    v.extend([
        ("fft_size", f.fft_size.to_string()),
        ("n_mels", f.n_mels.to_string()),
        ("fmax_hz", f.fmax_hz.to_string()),
        ("window_ms", f.window_ms.to_string()),
        ("hop_ms", f.hop_ms.to_string()),
        ("segment_frames", f.segment_frames.to_string()),
    ]);
    v
}
