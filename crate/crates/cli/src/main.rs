//! `nsti`: generate corpora, train the base model, transcribe, adapt and run
//! experiments.
//!
//! Every subcommand also reads its flags from a JSON file given with
//! `--config`. Keys are the long flag names (`"target-tilt": 0.01`). The file
//! may either hold one flat object or one object per subcommand keyed by the
//! subcommand name. Flags on the command line win over the file.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use nsti::adapt::{self, AdaptConfig, Setting};
use nsti::corpus::{normalize, read_recording, read_split, splits, write_corpus, CorpusConfig, CorpusOptions};
use nsti::ctc::{blank_ratio, greedy_decode};
use nsti::harness::experiments::{run_experiment, ExperimentOptions, Workspace};
use nsti::harness::report::{emit, Format};
use nsti::harness::{train_base, wer, TrainConfig};
use nsti::transforms::TransformSpec;
use nsti::windowing::{DEFAULT_STRIDE, DEFAULT_WINDOW};
use nsti::{Checkpoint, Error, Result};

#[derive(Parser)]
#[command(
    name = "nsti",
    version,
    about = "Test-time adaptation laboratory for CTC acoustic models"
)]
struct Cli {
    /// JSON file with default flag values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic source and target corpus.
    GenCorpus(GenCorpus),
    /// Train the base model on the source splits.
    TrainBase(TrainBase),
    /// Transcribe one recording with overlapping windows.
    Transcribe(Transcribe),
    /// Adapt a model to one recording and report the result.
    Adapt(Adapt),
    /// Run a named experiment over a workspace.
    Experiment(Experiment),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus(_) => "gen-corpus",
            Command::TrainBase(_) => "train-base",
            Command::Transcribe(_) => "transcribe",
            Command::Adapt(_) => "adapt",
            Command::Experiment(_) => "experiment",
        }
    }
}

/// Fills every unset field of `self` from `file`.
trait Merge: Sized {
    fn merge(self, file: Self) -> Self;
}

macro_rules! merge_fields {
    ($t:ty { $($f:ident),* } $(bools { $($b:ident),* })?) => {
        impl Merge for $t {
            fn merge(self, file: Self) -> Self {
                Self {
                    $($f: self.$f.or(file.$f),)*
                    $($($b: self.$b || file.$b,)*)?
                }
            }
        }
    };
}

#[derive(Args, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
struct GenCorpus {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Recordings per target evaluation split.
    #[arg(long)]
    recordings: Option<usize>,
    /// Approximate frames per target evaluation recording.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    target_tilt: Option<f64>,
    #[arg(long)]
    target_noise: Option<f64>,
}
merge_fields!(GenCorpus {
    out,
    seed,
    recordings,
    frames,
    target_tilt,
    target_noise
});

#[derive(Args, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
struct TrainBase {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
}
merge_fields!(TrainBase {
    corpus,
    out,
    seed,
    epochs,
    workers
});

#[derive(Args, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
struct Transcribe {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// A `rec_NNNN.bin` file from a generated corpus.
    #[arg(long)]
    recording: Option<PathBuf>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    stride: Option<f64>,
}
merge_fields!(Transcribe {
    ckpt,
    recording,
    window,
    stride
});

#[derive(Args, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
struct Adapt {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    recording: Option<PathBuf>,
    /// shuffled, ordered, online or awmc.
    #[arg(long)]
    setting: Option<String>,
    /// specaugment, identity, noise or cutout.
    #[arg(long)]
    transform: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    copies: Option<usize>,
    #[arg(long)]
    ema_alpha: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    stride: Option<f64>,
    /// Worker threads (0 = all cores); does not change the result.
    #[arg(long)]
    workers: Option<usize>,
    /// Also write the adapted checkpoint here.
    #[arg(long)]
    save: Option<PathBuf>,
    /// Include wall-clock seconds per epoch in the report.
    #[arg(long)]
    #[serde(default)]
    timing: bool,
}
merge_fields!(Adapt { ckpt, recording, setting, transform, epochs, lr, seed, copies, ema_alpha, window, stride, workers, save } bools { timing });

#[derive(Args, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
struct Experiment {
    /// settings_table, epoch_curve, transform_table, duration_sweep,
    /// nst_vs_nsti or cross_recording.
    name: Option<String>,
    #[arg(long)]
    workspace: Option<PathBuf>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Comma-separated formats: json, csv, svg.
    #[arg(long)]
    emit: Option<String>,
    /// Seed of the first repeat.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
}
merge_fields!(Experiment {
    name,
    workspace,
    repeats,
    emit,
    seed,
    epochs,
    lr,
    workers
});

fn required<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| Error::Usage(format!("--{flag} is required")))
}

/// The section of the config file that applies to `command`.
fn config_section<T: DeserializeOwned + Default>(path: Option<&Path>, command: &str) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let bytes = fs::read(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let section = match value.get(command) {
        Some(v @ serde_json::Value::Object(_)) => v.clone(),
        _ if value.as_object().is_some_and(|o| o.values().all(|v| !v.is_object())) => value,
        _ => serde_json::Value::Object(Default::default()),
    };
    serde_json::from_value(section).map_err(|e| Error::Validation(format!("{} [{command}]: {e}", path.display())))
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Usage(format!("cannot start worker pool: {e}")))
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn gen_corpus(a: GenCorpus) -> Result<()> {
    let d = CorpusOptions::default();
    let opts = CorpusOptions {
        seed: a.seed.unwrap_or(d.seed),
        recordings: a.recordings.unwrap_or(d.recordings),
        frames: a.frames.unwrap_or(d.frames),
        target_tilt: a.target_tilt.unwrap_or(d.target_tilt),
        target_noise: a.target_noise.unwrap_or(d.target_noise),
    };
    if opts.recordings == 0 || opts.frames == 0 {
        return Err(Error::Validation("recordings and frames must be positive".into()));
    }
    if !(opts.target_noise >= 0.0) || !opts.target_tilt.is_finite() {
        return Err(Error::Validation("target noise must be >= 0 and tilt finite".into()));
    }
    let out = required(a.out, "out")?;
    let config = CorpusConfig::reference(&opts);
    write_corpus(&config, &out)?;
    let counts: std::collections::BTreeMap<&String, usize> =
        config.splits.iter().map(|(k, s)| (k, s.recordings)).collect();
    print_json(&serde_json::json!({ "out": out, "seed": opts.seed, "recordings": counts }))
}

fn train(a: TrainBase) -> Result<()> {
    let corpus = required(a.corpus, "corpus")?;
    let out = required(a.out, "out")?;
    let mut config = TrainConfig::default();
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    config.validate()?;
    let train = read_split(&corpus, splits::SOURCE_TRAIN)?;
    let dev = read_split(&corpus, splits::SOURCE_DEV)?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "{} has no source splits",
            corpus.display()
        )));
    }
    let (model, log) = pool(a.workers.unwrap_or(0))?.install(|| train_base(&train, &dev, &config))?;
    model.save(&out)?;
    print_json(&log)
}

fn transcribe(a: Transcribe) -> Result<()> {
    let model = Checkpoint::load(&required(a.ckpt, "ckpt")?)?;
    let rec = read_recording(&required(a.recording, "recording")?)?;
    if rec.bins() != model.config().bins {
        return Err(Error::Shape(format!(
            "recording has {} bins, model expects {}",
            rec.bins(),
            model.config().bins
        )));
    }
    let lattice = adapt::transcribe_lattice(
        &model,
        &normalize(&rec.spectrogram),
        a.window.unwrap_or(DEFAULT_WINDOW),
        a.stride.unwrap_or(DEFAULT_STRIDE),
    )?;
    let transcript = greedy_decode(&lattice);
    print_json(&serde_json::json!({
        "recording_id": rec.id,
        "frames": rec.frames(),
        "transcript": transcript,
        "blank_ratio": blank_ratio(&lattice),
        "wer": wer(&rec.reference, &transcript),
    }))
}

fn adapt_cmd(a: Adapt) -> Result<()> {
    let model = Checkpoint::load(&required(a.ckpt, "ckpt")?)?;
    let rec = read_recording(&required(a.recording, "recording")?)?;
    let bins = model.config().bins;
    let setting = Setting::parse(a.setting.as_deref().unwrap_or("shuffled"))?;
    let mut config = AdaptConfig::new(setting, bins);
    config.transform = TransformSpec::named(a.transform.as_deref().unwrap_or("specaugment"), bins)?;
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { config.$f = v; })* };
    }
    set!(epochs, lr, seed, copies, ema_alpha, window, stride);
    config.validate(bins)?;
    let adapted = pool(a.workers.unwrap_or(0))?.install(|| adapt::run(&model, &rec, &config))?;
    if let Some(path) = a.save {
        adapted.checkpoint.save(&path)?;
    }
    let mut report = adapted.report;
    if a.timing {
        report.wall_clock_s = Some(adapted.epoch_seconds);
    }
    println!("{}", report.to_json()?);
    Ok(())
}

fn experiment(a: Experiment) -> Result<()> {
    let name = required(a.name, "name")?;
    let ws = Workspace::new(required(a.workspace, "workspace")?);
    let formats = Format::parse_list(a.emit.as_deref().unwrap_or("json,csv"))?;
    let d = ExperimentOptions::default();
    let opts = ExperimentOptions {
        repeats: a.repeats.unwrap_or(d.repeats),
        seed: a.seed.unwrap_or(d.seed),
        epochs: a.epochs.unwrap_or(d.epochs),
        lr: a.lr.unwrap_or(d.lr),
        workers: a.workers.unwrap_or(d.workers),
    };
    let mut report = run_experiment(&name, &ws, &opts)?;
    for path in emit(&mut report, &ws.reports_dir(), &formats)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let file = cli.config.as_deref();
    let name = cli.command.name();
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(a.merge(config_section(file, name)?)),
        Command::TrainBase(a) => train(a.merge(config_section(file, name)?)),
        Command::Transcribe(a) => transcribe(a.merge(config_section(file, name)?)),
        Command::Adapt(a) => adapt_cmd(a.merge(config_section(file, name)?)),
        Command::Experiment(a) => experiment(a.merge(config_section(file, name)?)),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
