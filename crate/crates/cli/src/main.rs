//! `naturalmos`: corpus generation, pretraining, fine-tuning, prediction and
//! evaluation for the naturalness MOS predictor.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use naturalmos::audio_io::{load_manifest, read_wav, DatasetManifest, Rescale, Split};
use naturalmos::autograd::gradcheck;
use naturalmos::degrade::generate_pretrain_corpus;
use naturalmos::features::compute_mel_spectrogram;
use naturalmos::metrics::evaluate_datasets;
use naturalmos::model::{inspect_checkpoint, load_checkpoint, save_checkpoint, Network};
use naturalmos::training::{
    finetune, prepare_set, prepare_validation_sets, pretrain, CsvLog, EpochLog, EpochRecord, TrainError,
};
use rayon::prelude::*;

use config::{parse_assignment, Settings, Source, SEED_ENV};

const USAGE: u8 = 1;
const DATA: u8 = 2;
const NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "naturalmos", version, about = "Naturalness MOS prediction from waveforms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed for every stochastic stage (default: $NATURALMOS_SEED, else 1234).
    #[arg(long)]
    seed: Option<u64>,
    /// Override any configuration key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads for feature extraction and prediction.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    finetune_max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Degrade clean references into a proxy-labelled pretraining corpus.
    MakePretrainData {
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        conditions: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Train a fresh model on the train split of a corpus manifest.
    Pretrain {
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Multi-run fine-tuning with validation-based model selection.
    Finetune {
        /// Training manifests (their train split is used).
        #[arg(long, required = true)]
        train: Vec<PathBuf>,
        /// Validation manifests; defaults to the validation split of the training manifests.
        #[arg(long)]
        val: Vec<PathBuf>,
        /// Pretrained checkpoint to start from (fresh weights otherwise).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Source rating scale `LO,HI`, mapped linearly onto [1, 5].
        #[arg(long, value_name = "LO,HI")]
        mos_range: Option<String>,
        #[command(flatten)]
        train_flags: TrainFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Score WAV files; prints `path<TAB>score`.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        wav: Vec<PathBuf>,
        /// Score every entry of a manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Clamp scores to [1, 5].
        #[arg(long)]
        clamp: bool,
        /// Write each file's mel spectrogram as CSV into this directory.
        #[arg(long)]
        dump_mel: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Per-stimulus and per-system correlation/RMSE report.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        /// Group label for the summary rows.
        #[arg(long, default_value = "all")]
        group: String,
        /// Report CSV path.
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
        #[arg(long, value_name = "LO,HI")]
        mos_range: Option<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Finite-difference verification of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = naturalmos::rng::DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        points: usize,
    },
    /// Print a checkpoint header.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
}

struct Failure {
    code: u8,
    err: anyhow::Error,
}

type CmdResult<T = ()> = Result<T, Failure>;

trait Classify<T> {
    fn usage(self) -> CmdResult<T>;
    fn data(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> CmdResult<T> {
        self.map_err(|e| Failure { code: USAGE, err: e.into() })
    }
    fn data(self) -> CmdResult<T> {
        self.map_err(|e| Failure { code: DATA, err: e.into() })
    }
}

fn train_failure(e: TrainError) -> Failure {
    let code = match e {
        TrainError::NonFiniteLoss { .. } => NUMERIC,
        TrainError::Config(_) => USAGE,
        _ => DATA,
    };
    Failure { code, err: e.into() }
}

fn settings(common: &Common, train: Option<&TrainFlags>) -> CmdResult<Settings> {
    let mut flags: Vec<(&'static str, String)> = common.set.iter().map(|s| parse_assignment(s)).collect::<Result<_, _>>().usage()?;
    if let Some(t) = train {
        let opt = |k: &'static str, v: Option<String>| v.map(|v| (k, v));
        flags.extend(
            [
                opt("lr", t.lr.map(|v| v.to_string())),
                opt("batch_size", t.batch_size.map(|v| v.to_string())),
                opt("runs", t.runs.map(|v| v.to_string())),
                opt("pretrain_epochs", t.pretrain_epochs.map(|v| v.to_string())),
                opt("finetune_max_epochs", t.finetune_max_epochs.map(|v| v.to_string())),
                opt("early_stop_patience", t.patience.map(|v| v.to_string())),
            ]
            .into_iter()
            .flatten(),
        );
    }
    if let Some(seed) = common.seed {
        flags.push(("seed", seed.to_string()));
    }
    let env_seed = std::env::var(SEED_ENV).ok().filter(|s| !s.trim().is_empty());
    let s = Settings::resolve(common.config.as_deref(), env_seed, &flags).usage()?;
    let seed = s.train().usage()?.seed;
    match s.source("seed") {
        Source::Default => eprintln!("seed = {seed} (default)"),
        src => eprintln!("seed = {seed} ({src})"),
    }
    let echo: Vec<String> = s.entries().iter().map(|(k, v)| format!("{k}={v}")).collect();
    eprintln!("config: {}", echo.join(" "));
    Ok(s)
}

fn rescale(arg: Option<&str>) -> CmdResult<Option<Rescale>> {
    let Some(arg) = arg else { return Ok(None) };
    let (lo, hi) = arg.split_once(',').ok_or_else(|| anyhow!("--mos-range expects LO,HI")).usage()?;
    let lo: f64 = lo.trim().parse().context("--mos-range LO").usage()?;
    let hi: f64 = hi.trim().parse().context("--mos-range HI").usage()?;
    Rescale::new(lo, hi).map(Some).map_err(|e| anyhow!(e)).usage()
}

/// Entries of every manifest with the given split, paths made absolute so
/// that manifests from different directories can be merged.
fn merged(manifests: &[DatasetManifest], split: Split) -> DatasetManifest {
    let mut entries = Vec::new();
    for m in manifests {
        for e in m.split(split) {
            let mut e = e.clone();
            e.path = m.resolve(&e).display().to_string();
            entries.push(e);
        }
    }
    DatasetManifest::new(entries, manifests.first().map(|m| m.source_path.clone()).unwrap_or_default())
}

fn load_all(paths: &[PathBuf], scale: Option<Rescale>) -> CmdResult<Vec<DatasetManifest>> {
    paths.iter().map(|p| load_manifest(p, scale)).collect::<Result<_, _>>().data()
}

/// Echoes epochs to stderr and optionally to a CSV file.
struct Progress {
    csv: Option<CsvLog<BufWriter<File>>>,
}

impl Progress {
    fn new(path: Option<&Path>) -> CmdResult<Self> {
        let csv = match path {
            Some(p) => Some(File::create(p).and_then(|f| CsvLog::new(BufWriter::new(f))).with_context(|| p.display().to_string()).data()?),
            None => None,
        };
        Ok(Self { csv })
    }
}

impl EpochLog for Progress {
    fn record(&mut self, rec: &EpochRecord) -> std::io::Result<()> {
        let pcc = rec.val_avg_pcc.map(|p| format!(" val_pcc {p:.4}")).unwrap_or_default();
        eprintln!("run {} epoch {:>3} loss {:.5}{pcc} ({:.1} s)", rec.run, rec.epoch, rec.train_loss, rec.seconds);
        match &mut self.csv {
            Some(c) => c.record(rec),
            None => Ok(()),
        }
    }
}

fn make_pretrain_data(refs: &Path, out: &Path, conditions: usize, common: &Common) -> CmdResult {
    if conditions == 0 {
        return Err(Failure { code: USAGE, err: anyhow!("--conditions must be positive") });
    }
    let seed = settings(common, None)?.train().usage()?.seed;
    let m = rayon::ThreadPoolBuilder::new()
        .num_threads(common.jobs.max(1))
        .build()
        .usage()?
        .install(|| generate_pretrain_corpus(refs, out, conditions, seed))
        .data()?;
    let val = m.split(Split::Validation).count();
    eprintln!("{} files ({} train, {val} validation)", m.entries.len(), m.entries.len() - val);
    println!("{}", m.source_path.display());
    Ok(())
}

fn run_pretrain(manifests: &[PathBuf], out: &Path, log: Option<&Path>, train: &TrainFlags, common: &Common) -> CmdResult {
    let s = settings(common, Some(train))?;
    let (config, features) = (s.train().usage()?, s.features().usage()?);
    let corpus = merged(&load_all(manifests, None)?, Split::Train);
    eprintln!("pretraining on {} files for {} epochs", corpus.entries.len(), config.pretrain_epochs);
    let set = prepare_set("pretrain", &corpus, &features, common.jobs).map_err(train_failure)?;
    let mut progress = Progress::new(log)?;
    let (ckpt, _) = pretrain(&set, &features, &config, &mut progress).map_err(train_failure)?;
    save_checkpoint(&ckpt, out).data()?;
    println!("{}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_finetune(
    train_paths: &[PathBuf],
    val_paths: &[PathBuf],
    init: Option<&Path>,
    out: &Path,
    log: Option<&Path>,
    mos_range: Option<&str>,
    flags: &TrainFlags,
    common: &Common,
) -> CmdResult {
    let s = settings(common, Some(flags))?;
    let config = s.train().usage()?;
    let start = init.map(load_checkpoint).transpose().data()?;
    let features = match &start {
        Some(c) => {
            if s.features_overridden() && s.features().usage()? != c.network.features {
                return Err(Failure { code: USAGE, err: anyhow!("feature settings differ from the --init checkpoint") });
            }
            c.network.features.clone()
        }
        None => s.features().usage()?,
    };
    let scale = rescale(mos_range)?;
    let train_manifests = load_all(train_paths, scale)?;
    let train_m = merged(&train_manifests, Split::Train);
    let val_ms = if val_paths.is_empty() {
        vec![merged(&train_manifests, Split::Validation)]
    } else {
        load_all(val_paths, scale)?
    };
    let val_ms: Vec<DatasetManifest> = val_ms.into_iter().filter(|m| !m.entries.is_empty()).collect();
    eprintln!("fine-tuning on {} files, {} run(s)", train_m.entries.len(), config.runs);
    let train = prepare_set("train", &train_m, &features, common.jobs).map_err(train_failure)?;
    let val = prepare_validation_sets(&val_ms, &features, common.jobs).map_err(train_failure)?;
    let mut progress = Progress::new(log)?;
    let outcome = finetune(start.as_ref().map(|c| &c.network), &features, &train, &val, &config, &mut progress)
        .map_err(train_failure)?;
    for r in &outcome.records {
        eprintln!("run {}: best epoch {} val_pcc {:.4} ({} epochs)", r.run, r.best_epoch, r.best_pcc, r.epochs.len());
    }
    eprintln!("selected run {} epoch {} (val_pcc {:.4})", outcome.best_run, outcome.best_epoch, outcome.best_pcc);
    save_checkpoint(&outcome.best, out).data()?;
    println!("{}", out.display());
    Ok(())
}

fn dump_mel(net: &Network<f32>, wav: &Path, dir: &Path) -> anyhow::Result<()> {
    let mel = compute_mel_spectrogram(&read_wav(wav)?, &net.features)?;
    let stem = wav.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into());
    let path = dir.join(format!("{stem}.mel.csv"));
    mel.write_csv(&path).with_context(|| path.display().to_string())
}

fn run_predict(
    model: &Path,
    wavs: &[PathBuf],
    manifest: Option<&Path>,
    clamp: bool,
    mel_dir: Option<&Path>,
    jobs: usize,
) -> CmdResult {
    let net = load_checkpoint(model).data()?.network;
    let mut items: Vec<(String, PathBuf)> = wavs.iter().map(|p| (p.display().to_string(), p.clone())).collect();
    if let Some(path) = manifest {
        let m = load_manifest(path, None).data()?;
        items.extend(m.entries.iter().map(|e| (e.path.clone(), m.resolve(e))));
    }
    if items.is_empty() {
        return Err(Failure { code: USAGE, err: anyhow!("nothing to score: pass --wav or --manifest") });
    }
    if let Some(dir) = mel_dir {
        std::fs::create_dir_all(dir).with_context(|| dir.display().to_string()).data()?;
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().usage()?;
    let scores: Vec<f64> = pool
        .install(|| {
            items
                .par_iter()
                .map(|(_, p)| {
                    if let Some(dir) = mel_dir {
                        dump_mel(&net, p, dir)?;
                    }
                    Ok(net.predict_file(p)?)
                })
                .collect::<anyhow::Result<Vec<f64>>>()
        })
        .data()?;
    let mut stdout = std::io::stdout().lock();
    for ((name, _), score) in items.iter().zip(scores) {
        if !score.is_finite() {
            return Err(Failure { code: NUMERIC, err: anyhow!("{name}: non-finite score") });
        }
        let score = if clamp { score.clamp(1.0, 5.0) } else { score };
        writeln!(stdout, "{name}\t{score:.4}").data()?;
    }
    Ok(())
}

fn run_evaluate(model: &Path, manifests: &[PathBuf], group: &str, out: &Path, mos_range: Option<&str>, jobs: usize) -> CmdResult {
    let ckpt = load_checkpoint(model).data()?;
    let scale = rescale(mos_range)?;
    let inputs: Vec<(DatasetManifest, String)> = load_all(manifests, scale)?.into_iter().map(|m| (m, group.to_string())).collect();
    let mut echo = vec![("model".to_string(), model.display().to_string())];
    echo.extend(ckpt.header.metadata.iter().filter(|(k, _)| k.starts_with("config") || *k == "stage").map(|(k, v)| (k.clone(), v.clone())));
    let f = &ckpt.network.features;
    echo.extend([
        ("fft_size".to_string(), f.fft_size.to_string()),
        ("n_mels".to_string(), f.n_mels.to_string()),
        ("fmax_hz".to_string(), f.fmax_hz.to_string()),
        ("window_ms".to_string(), f.window_ms.to_string()),
        ("hop_ms".to_string(), f.hop_ms.to_string()),
        ("segment_frames".to_string(), f.segment_frames.to_string()),
    ]);
    let report = evaluate_datasets(&ckpt.network, &inputs, jobs, echo).data()?;
    report.write_csv(out).data()?;
    print!("{}", report.to_table());
    eprintln!("report written to {}", out.display());
    Ok(())
}

fn run_gradcheck(seed: u64, points: usize) -> CmdResult {
    if points == 0 {
        return Err(Failure { code: USAGE, err: anyhow!("--points must be positive") });
    }
    let results = gradcheck::full_suite(seed, points).data()?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        if !r.passed() {
            failed += 1;
        }
        println!("{:<20} max_rel_err {:.3e}  threshold {:.0e}  {status}", r.name, r.max_rel_err, r.threshold);
    }
    if failed > 0 {
        return Err(Failure { code: NUMERIC, err: anyhow!("{failed} operation(s) exceeded their threshold") });
    }
    Ok(())
}

fn run_inspect(model: &Path) -> CmdResult {
    let header = inspect_checkpoint(model).data()?;
    let text = serde_json::to_string_pretty(&header).data()?;
    println!("{text}");
    Ok(())
}

fn dispatch(cli: Cli) -> CmdResult {
    match &cli.command {
        Command::MakePretrainData { refs, out, conditions, common } => make_pretrain_data(refs, out, *conditions, common),
        Command::Pretrain { manifest, out, log, train, common } => run_pretrain(manifest, out, log.as_deref(), train, common),
        Command::Finetune { train, val, init, out, log, mos_range, train_flags, common } => run_finetune(
            train,
            val,
            init.as_deref(),
            out,
            log.as_deref(),
            mos_range.as_deref(),
            train_flags,
            common,
        ),
        Command::Predict { model, wav, manifest, clamp, dump_mel, jobs } => {
            run_predict(model, wav, manifest.as_deref(), *clamp, dump_mel.as_deref(), *jobs)
        }
        Command::Evaluate { model, manifest, group, out, mos_range, jobs } => {
            run_evaluate(model, manifest, group, out, mos_range.as_deref(), *jobs)
        }
        Command::Gradcheck { seed, points } => run_gradcheck(*seed, *points),
        Command::Inspect { model } => run_inspect(model),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
