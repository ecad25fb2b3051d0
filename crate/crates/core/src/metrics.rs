//! Per-stimulus and per-system correlation/RMSE and report assembly.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::audio_io::{DatasetManifest, LabelLevel};
use crate::model::{ModelError, Network};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("need at least {min} values, got {len}")]
    TooShort { len: usize, min: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("correlation undefined for a constant sequence")]
    Constant,
    #[error("non-finite value")]
    NonFinite,
    #[error("no prediction for {0}")]
    MissingPrediction(String),
    #[error("dataset {dataset}: {source}")]
    Dataset { dataset: String, source: Box<MetricError> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("report CSV: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn check_pair(x: &[f64], y: &[f64], min: usize) -> Result<(), MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < min {
        return Err(MetricError::TooShort { len: x.len(), min });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

/// Sample Pearson correlation (mean-centred two-pass form).
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check_pair(x, y, 3)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::Constant);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Root-mean-square error with no mapping applied first.
pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64, MetricError> {
    check_pair(pred, target, 1)?;
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

/// Mean prediction and mean subjective score of one system.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemPair {
    pub dataset_id: String,
    pub system_id: String,
    pub n_files: usize,
    pub predicted: f64,
    pub subjective: f64,
}

/// Groups entries by (dataset, system) and averages predictions and MOS.
/// Output is sorted by dataset then system.
pub fn aggregate_per_system(
    predictions: &HashMap<String, f64>,
    manifest: &DatasetManifest,
) -> Result<Vec<SystemPair>, MetricError> {
    let mut groups: BTreeMap<(&str, &str), (usize, f64, f64)> = BTreeMap::new();
    for e in &manifest.entries {
        let p = *predictions.get(&e.path).ok_or_else(|| MetricError::MissingPrediction(e.path.clone()))?;
        let g = groups.entry((&e.dataset_id, &e.system_id)).or_insert((0, 0.0, 0.0));
        g.0 += 1;
        g.1 += p;
        g.2 += e.mos;
    }
    Ok(groups
        .into_iter()
        .map(|((d, s), (n, p, m))| SystemPair {
            dataset_id: d.to_string(),
            system_id: s.to_string(),
            n_files: n,
            predicted: p / n as f64,
            subjective: m / n as f64,
        })
        .collect())
}

/// Correlation (absent when undefined) and RMSE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub r: Option<f64>,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRow {
    pub dataset: String,
    pub group: String,
    pub n_files: usize,
    pub n_systems: usize,
    /// Absent unless every entry carries a per-stimulus label.
    pub per_stimuli: Option<Scores>,
    /// Correlation present only with at least three systems.
    pub per_system: Scores,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SummaryKind {
    Average,
    WorstCase,
}

impl SummaryKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::Average => "average",
            Self::WorstCase => "worst_case",
        }
    }

    fn title(self) -> &'static str {
        match self {
            Self::Average => "Average",
            Self::WorstCase => "Worst Case",
        }
    }
}

/// Mean (average) or min-r/max-RMSE (worst case) over a group's datasets;
/// each field summarizes only the datasets where it is present.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub group: String,
    pub kind: SummaryKind,
    pub n_datasets: usize,
    pub stim_r: Option<f64>,
    pub stim_rmse: Option<f64>,
    pub sys_r: Option<f64>,
    pub sys_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvaluationReport {
    pub datasets: Vec<DatasetRow>,
    pub summaries: Vec<SummaryRow>,
    /// Effective configuration echoed into the report footer.
    pub config: Vec<(String, String)>,
}

fn dataset_row(
    dataset: &str,
    group: &str,
    manifest: &DatasetManifest,
    predictions: &HashMap<String, f64>,
) -> Result<DatasetRow, MetricError> {
    let entries: Vec<_> = manifest.entries.iter().filter(|e| e.dataset_id == dataset).collect();
    let mut pred = Vec::with_capacity(entries.len());
    for e in &entries {
        pred.push(*predictions.get(&e.path).ok_or_else(|| MetricError::MissingPrediction(e.path.clone()))?);
    }
    let mos: Vec<f64> = entries.iter().map(|e| e.mos).collect();
    let per_stimuli = if entries.iter().all(|e| e.label_level == LabelLevel::PerStimulus) {
        Some(Scores { r: Some(pearson_r(&pred, &mos)?), rmse: rmse(&pred, &mos)? })
    } else {
        None
    };
    let sub = DatasetManifest::new(entries.iter().map(|e| (*e).clone()).collect(), manifest.source_path.clone());
    let systems = aggregate_per_system(predictions, &sub)?;
    let sp: Vec<f64> = systems.iter().map(|s| s.predicted).collect();
    let ss: Vec<f64> = systems.iter().map(|s| s.subjective).collect();
    let sys_r = if systems.len() >= 3 { Some(pearson_r(&sp, &ss)?) } else { None };
    Ok(DatasetRow {
        dataset: dataset.to_string(),
        group: group.to_string(),
        n_files: entries.len(),
        n_systems: systems.len(),
        per_stimuli,
        per_system: Scores { r: sys_r, rmse: rmse(&sp, &ss)? },
    })
}

fn summarize(values: impl Iterator<Item = Option<f64>>, kind: SummaryKind, worst_is_min: bool) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        return None;
    }
    Some(match kind {
        SummaryKind::Average => v.iter().sum::<f64>() / v.len() as f64,
        SummaryKind::WorstCase if worst_is_min => v.iter().copied().fold(f64::INFINITY, f64::min),
        SummaryKind::WorstCase => v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Builds the report from predictions keyed by manifest path. Each input is
/// a manifest (possibly holding several datasets) with its group label;
/// datasets appear in first-occurrence order and groups get an average and
/// a worst-case row.
pub fn build_report(
    inputs: &[(&DatasetManifest, &str, &HashMap<String, f64>)],
    config: Vec<(String, String)>,
) -> Result<EvaluationReport, MetricError> {
    let mut datasets = Vec::new();
    for (manifest, group, predictions) in inputs {
        let mut seen = BTreeSet::new();
        for e in &manifest.entries {
            if seen.insert(e.dataset_id.as_str()) {
                let row = dataset_row(&e.dataset_id, group, manifest, predictions)
                    .map_err(|err| MetricError::Dataset { dataset: e.dataset_id.clone(), source: Box::new(err) })?;
                datasets.push(row);
            }
        }
    }
    let mut groups: Vec<&str> = Vec::new();
    for d in &datasets {
        if !groups.contains(&d.group.as_str()) {
            groups.push(&d.group);
        }
    }
    let mut summaries = Vec::new();
    for g in groups {
        let rows: Vec<&DatasetRow> = datasets.iter().filter(|d| d.group == g).collect();
        for kind in [SummaryKind::Average, SummaryKind::WorstCase] {
            summaries.push(SummaryRow {
                group: g.to_string(),
                kind,
                n_datasets: rows.len(),
                stim_r: summarize(rows.iter().map(|d| d.per_stimuli.and_then(|s| s.r)), kind, true),
                stim_rmse: summarize(rows.iter().map(|d| d.per_stimuli.map(|s| s.rmse)), kind, false),
                sys_r: summarize(rows.iter().map(|d| d.per_system.r), kind, true),
                sys_rmse: summarize(rows.iter().map(|d| Some(d.per_system.rmse)), kind, false),
            });
        }
    }
    Ok(EvaluationReport { datasets, summaries, config })
}

/// Scores every file of every manifest (over `jobs` threads, results in
/// manifest order) and builds the report.
pub fn evaluate_datasets(
    network: &Network<f32>,
    inputs: &[(DatasetManifest, String)],
    jobs: usize,
    config: Vec<(String, String)>,
) -> Result<EvaluationReport, MetricError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| MetricError::Parse(format!("thread pool: {e}")))?;
    let mut all = Vec::new();
    for (manifest, _) in inputs {
        let preds: Vec<f64> = pool.install(|| {
            manifest
                .entries
                .par_iter()
                .map(|e| network.predict_file(manifest.resolve(e)))
                .collect::<Result<_, ModelError>>()
        })?;
        all.push(manifest.entries.iter().map(|e| e.path.clone()).zip(preds).collect::<HashMap<_, _>>());
    }
    let refs: Vec<_> = inputs.iter().zip(&all).map(|((m, g), p)| (m, g.as_str(), p)).collect();
    build_report(&refs, config)
}

pub const REPORT_HEADER: [&str; 9] =
    ["kind", "name", "group", "n_files", "n_systems", "stim_r", "stim_rmse", "sys_r", "sys_rmse"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvaluationReport {
    /// One row per dataset, then summary rows, then `config` rows carrying
    /// key and value in the name and group columns. Floats are written in
    /// shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut put = |rec: [String; 9]| w.write_record(&rec).expect("in-memory write");
        put(REPORT_HEADER.map(String::from));
        for d in &self.datasets {
            put([
                "dataset".into(),
                d.dataset.clone(),
                d.group.clone(),
                d.n_files.to_string(),
                d.n_systems.to_string(),
                opt(d.per_stimuli.and_then(|s| s.r)),
                opt(d.per_stimuli.map(|s| s.rmse)),
                opt(d.per_system.r),
                d.per_system.rmse.to_string(),
            ]);
        }
        for s in &self.summaries {
            put([
                s.kind.label().into(),
                s.group.clone(),
                s.group.clone(),
                s.n_datasets.to_string(),
                String::new(),
                opt(s.stim_r),
                opt(s.stim_rmse),
                opt(s.sys_r),
                opt(s.sys_rmse),
            ]);
        }
        for (k, v) in &self.config {
            put(["config".into(), k.clone(), v.clone(), String::new(), String::new(), String::new(), String::new(), String::new(), String::new()]);
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn from_csv(text: &str) -> Result<Self, MetricError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let headers = rdr.headers().map_err(|e| MetricError::Parse(e.to_string()))?.clone();
        if headers.iter().ne(REPORT_HEADER) {
            return Err(MetricError::Parse(format!("unexpected header {headers:?}")));
        }
        let num = |s: &str| -> Result<Option<f64>, MetricError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| MetricError::Parse(format!("bad number `{s}`")))
            }
        };
        let count = |s: &str| s.parse::<usize>().map_err(|_| MetricError::Parse(format!("bad count `{s}`")));
        let mut report = EvaluationReport::default();
        for rec in rdr.records() {
            let r = rec.map_err(|e| MetricError::Parse(e.to_string()))?;
            match &r[0] {
                "dataset" => {
                    let stim_r = num(&r[5])?;
                    let stim_rmse = num(&r[6])?;
                    let per_stimuli = stim_rmse.map(|rmse| Scores { r: stim_r, rmse });
                    report.datasets.push(DatasetRow {
                        dataset: r[1].to_string(),
                        group: r[2].to_string(),
                        n_files: count(&r[3])?,
                        n_systems: count(&r[4])?,
                        per_stimuli,
                        per_system: Scores {
                            r: num(&r[7])?,
                            rmse: num(&r[8])?.ok_or_else(|| MetricError::Parse("missing sys_rmse".into()))?,
                        },
                    });
                }
                kind @ ("average" | "worst_case") => report.summaries.push(SummaryRow {
                    group: r[2].to_string(),
                    kind: if kind == "average" { SummaryKind::Average } else { SummaryKind::WorstCase },
                    n_datasets: count(&r[3])?,
                    stim_r: num(&r[5])?,
                    stim_rmse: num(&r[6])?,
                    sys_r: num(&r[7])?,
                    sys_rmse: num(&r[8])?,
                }),
                "config" => report.config.push((r[1].to_string(), r[2].to_string())),
                other => return Err(MetricError::Parse(format!("unknown row kind `{other}`"))),
            }
        }
        Ok(report)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), MetricError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|source| MetricError::Io { path: path.display().to_string(), source })
    }

    /// Fixed-width table: dataset, files, systems, per-stimulus r/RMSE,
    /// per-system r/RMSE, two decimals, `N/A` where absent.
    pub fn to_table(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "N/A".to_string(), |x| format!("{x:.2}"));
        let width = self
            .datasets
            .iter()
            .map(|d| d.dataset.len())
            .chain(self.summaries.iter().map(|s| s.group.len() + 13))
            .chain(std::iter::once(7))
            .max()
            .unwrap_or(7);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>7}  {:>9}  {:>6}  {:>9}  {:>5}  {:>8}",
            "dataset", "n_files", "n_systems", "stim r", "stim RMSE", "sys r", "sys RMSE"
        );
        for d in &self.datasets {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7}  {:>9}  {:>6}  {:>9}  {:>5}  {:>8}",
                d.dataset,
                d.n_files,
                d.n_systems,
                f(d.per_stimuli.and_then(|s| s.r)),
                f(d.per_stimuli.map(|s| s.rmse)),
                f(d.per_system.r),
                f(Some(d.per_system.rmse)),
            );
        }
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7}  {:>9}  {:>6}  {:>9}  {:>5}  {:>8}",
                format!("{} ({})", s.kind.title(), s.group),
                "",
                "",
                f(s.stim_r),
                f(s.stim_rmse),
                f(s.sys_r),
                f(s.sys_rmse),
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_hand_cases() {
        assert!((pearson_r(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson_r(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!((pearson_r(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(pearson_r(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(MetricError::Constant)));
        assert!(matches!(pearson_r(&[1.0, 2.0], &[1.0, 2.0]), Err(MetricError::TooShort { .. })));
        assert!(matches!(pearson_r(&[1.0, 2.0, 3.0], &[1.0, 2.0]), Err(MetricError::LengthMismatch(3, 2))));
    }

    #[test]
    fn rmse_hand_cases() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 2.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(rmse(&[3.0], &[4.0]).unwrap(), 1.0);
        assert!(rmse(&[1.0], &[]).is_err());
    }

    #[test]
    fn table_marks_absent_fields() {
        let report = EvaluationReport {
            datasets: vec![DatasetRow {
                dataset: "blz".into(),
                group: "test".into(),
                n_files: 30,
                n_systems: 5,
                per_stimuli: None,
                per_system: Scores { r: Some(0.876), rmse: 0.4 },
            }],
            summaries: vec![],
            config: vec![],
        };
        let t = report.to_table();
        assert!(t.lines().next().unwrap().contains("stim RMSE"));
        assert!(t.contains("N/A") && t.contains("0.88") && t.contains("0.40"));
    }
}
