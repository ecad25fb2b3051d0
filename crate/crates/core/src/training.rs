//! Two-stage training: pretraining on the proxy-labelled corpus, then
//! multi-run fine-tuning with early stopping on validation correlation.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio_io::{read_wav, AudioError, DatasetManifest, LabelLevel};
use crate::autograd::{Adam, AdamConfig};
use crate::features::{extract_segments, FeatureConfig, SegmentSequence};
use crate::metrics::{pearson_r, MetricError};
use crate::model::{Checkpoint, ModelError, Network, PackedBatch};
use crate::rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no training entries")]
    EmptyTrainingSet,
    #[error("validation dataset {dataset} has {count} entries; at least 3 are needed")]
    ValidationTooSmall { dataset: String, count: usize },
    #[error("no validation datasets")]
    NoValidation,
    #[error("{path}: {source}")]
    File { path: String, source: Box<TrainError> },
    #[error("non-finite loss at run {run}, epoch {epoch}")]
    NonFiniteLoss { run: usize, epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("training log: {0}")]
    Log(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub pretrain_epochs: usize,
    pub finetune_max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            pretrain_epochs: 24,
            finetune_max_epochs: 100,
            early_stop_patience: 15,
            batch_size: 16,
            runs: 3,
            seed: rng::DEFAULT_SEED,
        }
    }
}

impl TrainConfig {
    /// `lr` may be zero (a frozen run); counts must be positive.
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr must be a non-negative number, got {}", self.lr)));
        }
        for (name, v) in [
            ("pretrain_epochs", self.pretrain_epochs),
            ("finetune_max_epochs", self.finetune_max_epochs),
            ("early_stop_patience", self.early_stop_patience),
            ("batch_size", self.batch_size),
            ("runs", self.runs),
        ] {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Key/value view, in a fixed order, for headers and reports.
    pub fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("lr".into(), self.lr.to_string()),
            ("pretrain_epochs".into(), self.pretrain_epochs.to_string()),
            ("finetune_max_epochs".into(), self.finetune_max_epochs.to_string()),
            ("early_stop_patience".into(), self.early_stop_patience.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("runs".into(), self.runs.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    /// First 16 hex digits of SHA-256 over the training and feature
    /// configuration JSON.
    pub fn hash(&self, features: &FeatureConfig) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("serializable"));
        h.update(serde_json::to_vec(features).expect("serializable"));
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Extracted features and regression targets, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledSet {
    pub name: String,
    pub items: Vec<(SegmentSequence, f64)>,
}

/// Per-file targets: the file's MOS, or the mean MOS of its
/// (dataset, system) group when labels are per system.
pub fn targets(manifest: &DatasetManifest) -> Vec<f64> {
    let mut sums: BTreeMap<(&str, &str), (f64, usize)> = BTreeMap::new();
    for e in &manifest.entries {
        let s = sums.entry((&e.dataset_id, &e.system_id)).or_insert((0.0, 0));
        s.0 += e.mos;
        s.1 += 1;
    }
    manifest
        .entries
        .iter()
        .map(|e| match e.label_level {
            LabelLevel::PerStimulus => e.mos,
            LabelLevel::PerSystem => {
                let (s, n) = sums[&(e.dataset_id.as_str(), e.system_id.as_str())];
                s / n as f64
            }
        })
        .collect()
}

fn extract_all(manifest: &DatasetManifest, features: &FeatureConfig, jobs: usize) -> Result<Vec<SegmentSequence>, TrainError> {
    let run = || {
        manifest
            .entries
            .par_iter()
            .map(|e| {
                let path = manifest.resolve(e);
                let wrap = |err: TrainError| TrainError::File { path: path.display().to_string(), source: Box::new(err) };
                let signal = read_wav(&path).map_err(|err| wrap(err.into()))?;
                extract_segments(&signal, features).map_err(|err| wrap(err.into()))
            })
            .collect::<Result<Vec<_>, TrainError>>()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| TrainError::Config(format!("thread pool: {e}")))?;
    pool.install(run)
}

/// Decodes and featurizes every entry (over `jobs` threads; results stay in
/// manifest order).
pub fn prepare_set(
    name: &str,
    manifest: &DatasetManifest,
    features: &FeatureConfig,
    jobs: usize,
) -> Result<LabelledSet, TrainError> {
    let seqs = extract_all(manifest, features, jobs)?;
    Ok(LabelledSet { name: name.to_string(), items: seqs.into_iter().zip(targets(manifest)).collect() })
}

/// Validation sets, one per dataset id across all manifests, in
/// first-occurrence order.
pub fn prepare_validation_sets(
    manifests: &[DatasetManifest],
    features: &FeatureConfig,
    jobs: usize,
) -> Result<Vec<LabelledSet>, TrainError> {
    let mut order: Vec<String> = Vec::new();
    let mut by_dataset: BTreeMap<String, DatasetManifest> = BTreeMap::new();
    for m in manifests {
        for e in &m.entries {
            if !by_dataset.contains_key(&e.dataset_id) {
                order.push(e.dataset_id.clone());
            }
            let sub = by_dataset
                .entry(e.dataset_id.clone())
                .or_insert_with(|| DatasetManifest::new(Vec::new(), m.source_path.clone()));
            let mut e = e.clone();
            e.path = m.resolve(&e).display().to_string();
            sub.entries.push(e);
        }
    }
    if order.is_empty() {
        return Err(TrainError::NoValidation);
    }
    order
        .iter()
        .map(|d| {
            let m = &by_dataset[d];
            if m.entries.len() < 3 {
                return Err(TrainError::ValidationTooSmall { dataset: d.clone(), count: m.entries.len() });
            }
            prepare_set(d, m, features, jobs)
        })
        .collect()
}

const EVAL_BATCH: usize = 32;

/// Eval-mode predictions for every item.
pub fn predict_set(network: &Network<f32>, set: &LabelledSet) -> Result<Vec<f64>, TrainError> {
    let mut out = Vec::with_capacity(set.items.len());
    for chunk in set.items.chunks(EVAL_BATCH) {
        let seqs: Vec<&SegmentSequence> = chunk.iter().map(|(s, _)| s).collect();
        out.extend(network.predict_batch(&PackedBatch::new(&seqs)?)?);
    }
    Ok(out)
}

/// Mean over validation sets of the per-stimulus correlation. A set whose
/// predictions are constant contributes NaN.
pub fn validation_pcc(network: &Network<f32>, sets: &[LabelledSet]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for set in sets {
        let pred = predict_set(network, set)?;
        let target: Vec<f64> = set.items.iter().map(|(_, t)| *t).collect();
        total += match pearson_r(&pred, &target) {
            Ok(r) => r,
            Err(MetricError::Constant) => f64::NAN,
            Err(e) => return Err(e.into()),
        };
    }
    Ok(total / sets.len() as f64)
}

/// One pass over `set` in a shuffled order, one Adam step per batch.
/// Returns the file-weighted mean training MSE. `seed` keys the shuffle
/// (per epoch) and dropout (per optimizer step) streams.
pub fn train_epoch(
    network: &mut Network<f32>,
    adam: &mut Adam<f32>,
    set: &LabelledSet,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<f64, TrainError> {
    if set.items.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mut order: Vec<usize> = (0..set.items.len()).collect();
    order.shuffle(&mut rng::stream(seed, "shuffle", epoch as u64));
    let mut weighted = 0.0;
    for chunk in order.chunks(batch_size.max(1)) {
        let seqs: Vec<&SegmentSequence> = chunk.iter().map(|&i| &set.items[i].0).collect();
        let targets: Vec<f64> = chunk.iter().map(|&i| set.items[i].1).collect();
        let batch = PackedBatch::new(&seqs)?;
        let mut dropout = rng::stream(seed, "dropout", adam.steps());
        let loss = network.loss_and_grads(&batch, &targets, &mut dropout)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { run: 0, epoch });
        }
        adam.step(&mut network.params).map_err(ModelError::from)?;
        weighted += loss * chunk.len() as f64;
    }
    Ok(weighted / set.items.len() as f64)
}

/// One epoch's log line.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub run: usize,
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Absent during pretraining.
    pub val_avg_pcc: Option<f64>,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "run,epoch,train_loss,val_avg_pcc,seconds";

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        let pcc = self.val_avg_pcc.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{},{:.3}", self.run, self.epoch, self.train_loss, pcc, self.seconds)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRunRecord {
    pub run: usize,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the highest validation PCC.
    pub best_epoch: usize,
    pub best_pcc: f64,
    pub checkpoint_path: Option<std::path::PathBuf>,
}

/// Sink for per-epoch records (e.g. a CSV log).
pub trait EpochLog {
    fn record(&mut self, rec: &EpochRecord) -> std::io::Result<()>;
}

impl EpochLog for () {
    fn record(&mut self, _: &EpochRecord) -> std::io::Result<()> {
        Ok(())
    }
}

/// Writes [`LOG_HEADER`] then one CSV line per epoch.
pub struct CsvLog<W: Write>(W);

impl<W: Write> CsvLog<W> {
    pub fn new(mut w: W) -> std::io::Result<Self> {
        writeln!(w, "{LOG_HEADER}")?;
        Ok(Self(w))
    }

    pub fn into_inner(self) -> W {
        self.0
    }
}

impl<W: Write> EpochLog for CsvLog<W> {
    fn record(&mut self, rec: &EpochRecord) -> std::io::Result<()> {
        writeln!(self.0, "{}", rec.csv_line())?;
        self.0.flush()
    }
}

/// Collects records in memory.
impl EpochLog for Vec<EpochRecord> {
    fn record(&mut self, rec: &EpochRecord) -> std::io::Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

fn base_metadata(stage: &str, config: &TrainConfig, features: &FeatureConfig) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("stage".into(), stage.into());
    meta.insert("config_hash".into(), config.hash(features));
    for (k, v) in config.entries() {
        meta.insert(format!("config.{k}"), v);
    }
    meta
}

/// Trains a fresh network for exactly `pretrain_epochs` epochs.
pub fn pretrain(
    set: &LabelledSet,
    features: &FeatureConfig,
    config: &TrainConfig,
    log: &mut dyn EpochLog,
) -> Result<(Checkpoint, Vec<EpochRecord>), TrainError> {
    config.validate()?;
    features.validate()?;
    if set.items.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mut net = Network::<f32>::initialized(features.clone(), config.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr));
    let mut records = Vec::new();
    for epoch in 1..=config.pretrain_epochs {
        let start = Instant::now();
        let loss = train_epoch(&mut net, &mut adam, set, config.batch_size, config.seed, epoch)
            .map_err(|e| with_position(e, 0, epoch))?;
        let rec = EpochRecord { run: 0, epoch, train_loss: loss, val_avg_pcc: None, seconds: start.elapsed().as_secs_f64() };
        log.record(&rec)?;
        records.push(rec);
    }
    let mut meta = base_metadata("pretrain", config, features);
    meta.insert("epochs".into(), config.pretrain_epochs.to_string());
    meta.insert("train_files".into(), set.items.len().to_string());
    meta.insert("final_loss".into(), records.last().map(|r| r.train_loss.to_string()).unwrap_or_default());
    Ok((Checkpoint::new(net, config.seed, meta).with_optimizer(adam), records))
}

fn with_position(e: TrainError, run: usize, epoch: usize) -> TrainError {
    match e {
        TrainError::NonFiniteLoss { .. } => TrainError::NonFiniteLoss { run, epoch },
        other => other,
    }
}

/// NaN sorts below every number.
fn better(a: f64, b: f64) -> bool {
    match (a.is_nan(), b.is_nan()) {
        (true, _) => false,
        (false, true) => true,
        (false, false) => a > b,
    }
}

/// Argmax of validation PCC over all (run, epoch) pairs; ties go to the
/// lowest run, then the lowest epoch. Returns `(run, epoch)`.
pub fn select_best_run(records: &[TrainRunRecord]) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for r in records {
        for e in &r.epochs {
            let pcc = e.val_avg_pcc.unwrap_or(f64::NAN);
            if best.is_none() || best.is_some_and(|(_, _, b)| better(pcc, b)) {
                best = Some((r.run, e.epoch, pcc));
            }
        }
    }
    best.map(|(r, e, _)| (r, e))
}

pub struct FinetuneOutcome {
    pub best: Checkpoint,
    pub best_run: usize,
    pub best_epoch: usize,
    pub best_pcc: f64,
    pub records: Vec<TrainRunRecord>,
}

/// `runs` independent fine-tuning runs (run `r` uses seed `seed + r`), all
/// weights trainable, each epoch scored by the mean per-dataset validation
/// PCC and stopped after `early_stop_patience` epochs without improvement.
/// Returns the overall best (run, epoch) state.
pub fn finetune(
    start: Option<&Network<f32>>,
    features: &FeatureConfig,
    train: &LabelledSet,
    validation: &[LabelledSet],
    config: &TrainConfig,
    log: &mut dyn EpochLog,
) -> Result<FinetuneOutcome, TrainError> {
    config.validate()?;
    if train.items.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    if validation.is_empty() {
        return Err(TrainError::NoValidation);
    }
    for v in validation {
        if v.items.len() < 3 {
            return Err(TrainError::ValidationTooSmall { dataset: v.name.clone(), count: v.items.len() });
        }
    }
    if let Some(net) = start {
        if &net.features != features {
            return Err(TrainError::Config("start checkpoint uses a different feature configuration".into()));
        }
    }
    let mut records = Vec::new();
    let mut best_states = Vec::new();
    for run in 0..config.runs {
        let seed = config.seed.wrapping_add(run as u64);
        let mut net = match start {
            Some(n) => n.clone(),
            None => Network::initialized(features.clone(), seed),
        };
        let mut adam = Adam::new(AdamConfig::with_lr(config.lr));
        let mut epochs = Vec::new();
        let mut best: Option<(usize, f64, Network<f32>)> = None;
        let mut since_best = 0;
        for epoch in 1..=config.finetune_max_epochs {
            let t0 = Instant::now();
            let loss = train_epoch(&mut net, &mut adam, train, config.batch_size, seed, epoch)
                .map_err(|e| with_position(e, run, epoch))?;
            let pcc = validation_pcc(&net, validation)?;
            let rec = EpochRecord { run, epoch, train_loss: loss, val_avg_pcc: Some(pcc), seconds: t0.elapsed().as_secs_f64() };
            log.record(&rec)?;
            epochs.push(rec);
            if best.as_ref().is_none_or(|(_, b, _)| better(pcc, *b)) {
                best = Some((epoch, pcc, net.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.early_stop_patience {
                    break;
                }
            }
        }
        let (best_epoch, best_pcc, state) = best.expect("at least one epoch");
        records.push(TrainRunRecord { run, epochs, best_epoch, best_pcc, checkpoint_path: None });
        best_states.push(state);
    }
    let (best_run, best_epoch) = select_best_run(&records).expect("at least one run");
    let best_pcc = records[best_run].best_pcc;
    let mut meta = base_metadata("finetune", config, features);
    meta.insert("start".into(), if start.is_some() { "pretrained" } else { "scratch" }.into());
    meta.insert("best_run".into(), best_run.to_string());
    meta.insert("best_epoch".into(), best_epoch.to_string());
    meta.insert("best_val_pcc".into(), best_pcc.to_string());
    let network = best_states.swap_remove(best_run);
    let best = Checkpoint::new(network, config.seed, meta);
    Ok(FinetuneOutcome { best, best_run, best_epoch, best_pcc, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(run: usize, pccs: &[f64]) -> TrainRunRecord {
        let epochs = pccs
            .iter()
            .enumerate()
            .map(|(i, &p)| EpochRecord { run, epoch: i + 1, train_loss: 0.0, val_avg_pcc: Some(p), seconds: 0.0 })
            .collect();
        TrainRunRecord { run, epochs, best_epoch: 1, best_pcc: 0.0, checkpoint_path: None }
    }

    #[test]
    fn best_run_selection() {
        let recs = vec![record(0, &[0.4]), record(1, &[0.7]), record(2, &[0.6])];
        assert_eq!(select_best_run(&recs), Some((1, 1)));
        let recs = vec![record(0, &[0.5, 0.5]), record(1, &[0.5])];
        assert_eq!(select_best_run(&recs), Some((0, 1)));
        assert_eq!(select_best_run(&[record(0, &[0.1])]), Some((0, 1)));
        let recs = vec![record(0, &[f64::NAN, 0.2, 0.3, 0.35, 0.9, 0.1])];
        assert_eq!(select_best_run(&recs), Some((0, 5)));
        assert_eq!(select_best_run(&[]), None);
    }

    #[test]
    fn config_validation_and_hash() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert!(TrainConfig { runs: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..c.clone() }.validate().is_err());
        let f = FeatureConfig::default();
        assert_eq!(c.hash(&f), c.hash(&f));
        assert_ne!(c.hash(&f), TrainConfig { seed: 1, ..c }.hash(&f));
    }
}
