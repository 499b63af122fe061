//! The six experiment drivers and the workspace they run against.
//!
//! A workspace directory holds `corpus/` (as written by
//! [`write_corpus`](crate::corpus::write_corpus)), the base model
//! `base.ckpt`, a `cache/` of finished adaptation runs and the emitted
//! `reports/`. Every adaptation run is cached under a content hash of its
//! inputs, so an interrupted experiment resumes where it stopped and
//! experiments that share runs (the settings table, the epoch curve and the
//! cross-recording study all use shuffled NSTI on the test split) compute
//! them once.

use std::collections::BTreeMap;
use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fnv::FnvHasher;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{self, transcribe_lattice, AdaptConfig, AdaptReport, Setting, DEFAULT_EPOCHS, DEFAULT_LR};
use crate::corpus::{encode_spectrogram, normalize, read_corpus_config, read_split, splits, CorpusConfig, Recording};
use crate::ctc::{blank_ratio, greedy_decode};
use crate::harness::metrics::{mean_std, rtf, wer, werr, WerBreakdown};
use crate::transforms::TransformSpec;
use crate::{Checkpoint, Error, Result};

pub const EXPERIMENTS: [&str; 6] = [
    "settings_table",
    "epoch_curve",
    "transform_table",
    "duration_sweep",
    "nst_vs_nsti",
    "cross_recording",
];

/// Partition lengths of the duration sweep, in windows.
pub const DURATION_FACTORS: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Clone, Debug)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.root.join("base.ckpt")
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.root.join("cache")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn corpus(&self) -> Result<CorpusConfig> {
        read_corpus_config(&self.corpus_dir())
    }

    pub fn split(&self, name: &str) -> Result<Vec<Recording>> {
        let recs = read_split(&self.corpus_dir(), name)?;
        if recs.is_empty() {
            return Err(Error::MissingArtifact(format!(
                "split {name} in {} holds no recordings",
                self.corpus_dir().display()
            )));
        }
        Ok(recs)
    }

    pub fn base(&self) -> Result<Checkpoint> {
        Checkpoint::load(&self.checkpoint_path())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOptions {
    pub repeats: usize,
    /// Seed of the first repeat; repeat `r` uses `seed + r`.
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    /// Worker threads; 0 lets rayon decide. Has no effect on the results.
    #[serde(skip)]
    pub workers: usize,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            repeats: 3,
            seed: 101,
            epochs: DEFAULT_EPOCHS,
            lr: DEFAULT_LR,
            workers: 0,
        }
    }
}

impl ExperimentOptions {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Validation("repeats must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Validation("experiments need at least one epoch".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Validation(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|r| self.seed + r).collect()
    }
}

/// One recording under one condition in one repeat.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingResult {
    pub recording_id: u64,
    pub repeat: usize,
    pub seed: u64,
    pub wer: WerBreakdown,
    pub blank_ratio: f64,
    pub skips: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub condition: String,
    pub split: String,
    /// Mean over repeats of the mean per-recording error.
    pub mean_wer: f64,
    pub stdev_wer: Option<f64>,
    pub mean_deletion_rate: f64,
    pub mean_blank_ratio: f64,
    pub recordings: Vec<RecordingResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub stdev: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub options: ExperimentOptions,
    /// Adaptation defaults (the seed is that of the first repeat).
    pub adapt: AdaptConfig,
    pub corpus: CorpusConfig,
    /// FNV-1a digest of the base checkpoint bytes.
    pub base_checkpoint: String,
}

/// Measured processing cost of one condition. Kept out of the report itself
/// so that reruns reproduce the report byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub condition: String,
    pub split: String,
    pub audio_seconds: f64,
    pub first_epoch_rtf: f64,
    pub total_rtf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub repeats: usize,
    pub seeds: Vec<u64>,
    pub config: ReportConfig,
    pub rows: Vec<ConditionRow>,
    pub series: Vec<Series>,
    pub summary: BTreeMap<String, f64>,
    /// File names written next to the report, relative to its directory.
    pub artifacts: Vec<String>,
    #[serde(skip)]
    pub timing: Vec<TimingRow>,
}

impl ExperimentReport {
    pub fn row(&self, condition: &str, split: &str) -> Option<&ConditionRow> {
        self.rows.iter().find(|r| r.condition == condition && r.split == split)
    }

    pub fn summary_value(&self, key: &str) -> Option<f64> {
        self.summary.get(key).copied()
    }
}

pub fn digest(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn recording_digest(rec: &Recording) -> u64 {
    let mut h = FnvHasher::default();
    h.write(&encode_spectrogram(&rec.spectrogram));
    for &l in &rec.reference {
        h.write_u64(l as u64);
    }
    h.write_u64(rec.id);
    h.finish()
}

/// A checkpoint together with the digest that keys cached runs on it.
#[derive(Clone)]
struct Model {
    checkpoint: Checkpoint,
    digest: u64,
}

impl Model {
    fn new(checkpoint: Checkpoint) -> Result<Self> {
        let digest = digest(&checkpoint.to_bytes()?);
        Ok(Self { checkpoint, digest })
    }
}

#[derive(Serialize, Deserialize)]
struct CachedRun {
    report: AdaptReport,
    epoch_seconds: Vec<f64>,
}

struct RunOutput {
    report: AdaptReport,
    epoch_seconds: Vec<f64>,
    /// Models after epoch 1 and after the last epoch (NSTI settings only).
    snapshots: Vec<(usize, Checkpoint)>,
}

impl RunOutput {
    fn result(&self, repeat: usize) -> RecordingResult {
        let last = self.report.epochs.last().unwrap_or(&self.report.initial);
        RecordingResult {
            recording_id: self.report.recording_id,
            repeat,
            seed: self.report.config.seed,
            wer: self.report.final_wer,
            blank_ratio: last.blank_ratio,
            skips: self.report.total_skips(),
        }
    }

    fn snapshot(&self, epoch: usize) -> Result<&Checkpoint> {
        self.snapshots
            .iter()
            .find(|(e, _)| *e == epoch)
            .map(|(_, c)| c)
            .ok_or_else(|| Error::MissingArtifact(format!("no snapshot after epoch {epoch}")))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Lab<'a> {
    ws: &'a Workspace,
    opts: &'a ExperimentOptions,
    corpus: CorpusConfig,
    base: Model,
    pool: rayon::ThreadPool,
    timing: Vec<TimingRow>,
}

impl<'a> Lab<'a> {
    fn open(ws: &'a Workspace, opts: &'a ExperimentOptions) -> Result<Self> {
        opts.validate()?;
        let corpus = ws.corpus()?;
        let base = Model::new(ws.base()?)?;
        if base.checkpoint.config().bins != corpus.bins {
            return Err(Error::Shape(format!(
                "base model expects {} bins, corpus has {}",
                base.checkpoint.config().bins,
                corpus.bins
            )));
        }
        fs::create_dir_all(ws.cache_dir())?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| Error::Usage(format!("cannot start worker pool: {e}")))?;
        Ok(Self {
            ws,
            opts,
            corpus,
            base,
            pool,
            timing: Vec::new(),
        })
    }

    fn bins(&self) -> usize {
        self.corpus.bins
    }

    fn config(&self, setting: Setting, transform: &str, seed: u64) -> Result<AdaptConfig> {
        let mut c = AdaptConfig::new(setting, self.bins());
        c.transform = TransformSpec::named(transform, self.bins())?;
        if !setting.single_pass() {
            c.epochs = self.opts.epochs;
        }
        c.lr = self.opts.lr;
        c.seed = seed;
        Ok(c)
    }

    fn snapshot_epochs(&self, config: &AdaptConfig) -> Vec<usize> {
        if config.setting.single_pass() {
            Vec::new()
        } else {
            let mut keep = vec![1, config.epochs];
            keep.dedup();
            keep
        }
    }

    fn run_key(&self, base: &Model, rec: &Recording, config: &AdaptConfig) -> Result<u64> {
        let mut h = FnvHasher::default();
        h.write(b"adapt-run/1");
        h.write_u64(base.digest);
        h.write_u64(recording_digest(rec));
        h.write(&serde_json::to_vec(config)?);
        Ok(h.finish())
    }

    /// Adapts one recording, or loads the finished run from the cache.
    fn run(&self, base: &Model, rec: &Recording, config: &AdaptConfig) -> Result<RunOutput> {
        let key = self.run_key(base, rec, config)?;
        let dir = self.ws.cache_dir();
        let json = dir.join(format!("{key:016x}.json"));
        let keep = self.snapshot_epochs(config);
        let ckpt = |e: usize| dir.join(format!("{key:016x}.e{e}.ckpt"));
        if let Ok(bytes) = fs::read(&json) {
            let cached: Result<CachedRun> = serde_json::from_slice(&bytes).map_err(Error::from);
            let snaps: Result<Vec<(usize, Checkpoint)>> =
                keep.iter().map(|&e| Ok((e, Checkpoint::load(&ckpt(e))?))).collect();
            if let (Ok(c), Ok(snapshots)) = (cached, snaps) {
                return Ok(RunOutput {
                    report: c.report,
                    epoch_seconds: c.epoch_seconds,
                    snapshots,
                });
            }
        }
        let (adapted, snapshots) = if config.setting.single_pass() {
            (adapt::run(&base.checkpoint, rec, config)?, Vec::new())
        } else {
            adapt::nsti_run_with_snapshots(&base.checkpoint, rec, config, &keep)?
        };
        for (e, c) in &snapshots {
            write_atomic(&ckpt(*e), &c.to_bytes()?)?;
        }
        let cached = CachedRun {
            report: adapted.report,
            epoch_seconds: adapted.epoch_seconds,
        };
        write_atomic(&json, &serde_json::to_vec(&cached)?)?;
        Ok(RunOutput {
            report: cached.report,
            epoch_seconds: cached.epoch_seconds,
            snapshots,
        })
    }

    /// Every recording under every repeat seed, in (repeat, recording) order.
    fn run_all(
        &self,
        base: &Model,
        recs: &[Recording],
        setting: Setting,
        transform: &str,
    ) -> Result<Vec<(usize, RunOutput)>> {
        let jobs = self
            .opts
            .seeds()
            .into_iter()
            .enumerate()
            .flat_map(|(r, seed)| recs.iter().map(move |rec| (r, seed, rec)))
            .map(|(r, seed, rec)| Ok((r, self.config(setting, transform, seed)?, rec)))
            .collect::<Result<Vec<_>>>()?;
        self.pool.install(|| {
            jobs.par_iter()
                .map(|(r, config, rec)| Ok((*r, self.run(base, rec, config)?)))
                .collect()
        })
    }

    fn record_timing(&mut self, condition: &str, split: &str, runs: &[(usize, RunOutput)], recs: &[Recording]) {
        let audio: f64 = recs.iter().map(Recording::duration_seconds).sum::<f64>() * self.opts.repeats as f64;
        let first: f64 = runs
            .iter()
            .map(|(_, o)| o.epoch_seconds.first().copied().unwrap_or(0.0))
            .sum();
        let total: f64 = runs.iter().map(|(_, o)| o.epoch_seconds.iter().sum::<f64>()).sum();
        if let (Ok(first_epoch_rtf), Ok(total_rtf)) = (rtf(first, audio), rtf(total, audio)) {
            self.timing.push(TimingRow {
                condition: condition.into(),
                split: split.into(),
                audio_seconds: audio,
                first_epoch_rtf,
                total_rtf,
            });
        }
    }

    fn adapted_row(
        &mut self,
        condition: &str,
        split: &str,
        recs: &[Recording],
        setting: Setting,
        transform: &str,
    ) -> Result<(ConditionRow, Vec<(usize, RunOutput)>)> {
        let base = self.base.clone();
        self.adapted_row_from(&base, condition, split, recs, setting, transform)
    }

    fn adapted_row_from(
        &mut self,
        base: &Model,
        condition: &str,
        split: &str,
        recs: &[Recording],
        setting: Setting,
        transform: &str,
    ) -> Result<(ConditionRow, Vec<(usize, RunOutput)>)> {
        let runs = self.run_all(base, recs, setting, transform)?;
        self.record_timing(condition, split, &runs, recs);
        let results = runs.iter().map(|(r, o)| o.result(*r)).collect();
        Ok((condition_row(condition, split, results, self.opts.repeats), runs))
    }

    /// Per-recording results of `model` with overlapping-window decoding,
    /// repeated under every seed (the decode itself does not depend on it).
    fn decoded_results(&self, model: &Checkpoint, recs: &[Recording]) -> Result<(Vec<RecordingResult>, f64)> {
        let t0 = Instant::now();
        let w = self.corpus_window();
        let per_rec: Vec<(WerBreakdown, f64)> = self.pool.install(|| {
            recs.par_iter()
                .map(|rec| {
                    let lattice = transcribe_lattice(model, &normalize(&rec.spectrogram), w.0, w.1)?;
                    Ok((wer(&rec.reference, &greedy_decode(&lattice)), blank_ratio(&lattice)))
                })
                .collect::<Result<_>>()
        })?;
        let seconds = t0.elapsed().as_secs_f64();
        let results = self
            .opts
            .seeds()
            .into_iter()
            .enumerate()
            .flat_map(|(r, seed)| {
                recs.iter()
                    .zip(&per_rec)
                    .map(move |(rec, &(wer, blank_ratio))| RecordingResult {
                        recording_id: rec.id,
                        repeat: r,
                        seed,
                        wer,
                        blank_ratio,
                        skips: 0,
                    })
            })
            .collect();
        Ok((results, seconds))
    }

    fn corpus_window(&self) -> (usize, f64) {
        let c = AdaptConfig::new(Setting::Shuffled, self.bins());
        (c.window, c.stride)
    }

    fn unadapted_row(&mut self, split: &str, recs: &[Recording]) -> Result<ConditionRow> {
        let base = self.base.checkpoint.clone();
        let (results, seconds) = self.decoded_results(&base, recs)?;
        let audio: f64 = recs.iter().map(Recording::duration_seconds).sum();
        if let Ok(r) = rtf(seconds, audio) {
            self.timing.push(TimingRow {
                condition: "unadapted".into(),
                split: split.into(),
                audio_seconds: audio,
                first_epoch_rtf: r,
                total_rtf: r,
            });
        }
        Ok(condition_row("unadapted", split, results, self.opts.repeats))
    }

    fn report(
        &mut self,
        experiment: &str,
        rows: Vec<ConditionRow>,
        series: Vec<Series>,
        summary: BTreeMap<String, f64>,
    ) -> ExperimentReport {
        let mut adapt = AdaptConfig::new(Setting::Shuffled, self.bins());
        adapt.epochs = self.opts.epochs;
        adapt.lr = self.opts.lr;
        adapt.seed = self.opts.seed;
        ExperimentReport {
            experiment: experiment.into(),
            repeats: self.opts.repeats,
            seeds: self.opts.seeds(),
            config: ReportConfig {
                options: self.opts.clone(),
                adapt,
                corpus: self.corpus.clone(),
                base_checkpoint: format!("{:016x}", self.base.digest),
            },
            rows,
            series,
            summary,
            artifacts: Vec::new(),
            timing: std::mem::take(&mut self.timing),
        }
    }
}

/// Mean per-recording error of each repeat, in repeat order.
fn repeat_means(results: &[RecordingResult], repeats: usize, f: impl Fn(&RecordingResult) -> f64) -> Vec<f64> {
    (0..repeats)
        .map(|r| {
            let v: Vec<f64> = results.iter().filter(|x| x.repeat == r).map(&f).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    mean_std(v).0
}

fn condition_row(condition: &str, split: &str, recordings: Vec<RecordingResult>, repeats: usize) -> ConditionRow {
    let (mean_wer, stdev_wer) = mean_std(&repeat_means(&recordings, repeats, |r| r.wer.wer));
    ConditionRow {
        condition: condition.into(),
        split: split.into(),
        mean_wer,
        stdev_wer,
        mean_deletion_rate: mean(&repeat_means(&recordings, repeats, |r| r.wer.deletion_rate())),
        mean_blank_ratio: mean(&repeat_means(&recordings, repeats, |r| r.blank_ratio)),
        recordings,
    }
}

/// Mean over repeats of the relative reduction of `adapted` against `baseline`.
fn row_werr(baseline: &ConditionRow, adapted: &ConditionRow, repeats: usize) -> Option<f64> {
    let b = repeat_means(&baseline.recordings, repeats, |r| r.wer.wer);
    let a = repeat_means(&adapted.recordings, repeats, |r| r.wer.wer);
    let v: Vec<f64> = b.iter().zip(&a).filter_map(|(&b, &a)| werr(b, a).ok()).collect();
    (v.len() == repeats).then(|| mean(&v))
}

fn put(summary: &mut BTreeMap<String, f64>, key: String, value: Option<f64>) {
    if let Some(v) = value.filter(|v| v.is_finite()) {
        summary.insert(key, v);
    }
}

/// Runs experiment `name` against `ws`.
pub fn run_experiment(name: &str, ws: &Workspace, opts: &ExperimentOptions) -> Result<ExperimentReport> {
    if !EXPERIMENTS.contains(&name) {
        return Err(Error::Usage(format!(
            "unknown experiment {name:?}; expected one of {}",
            EXPERIMENTS.join(", ")
        )));
    }
    let mut lab = Lab::open(ws, opts)?;
    match name {
        "settings_table" => settings_table(&mut lab),
        "epoch_curve" => epoch_curve(&mut lab),
        "transform_table" => transform_table(&mut lab),
        "duration_sweep" => duration_sweep(&mut lab),
        "nst_vs_nsti" => nst_vs_nsti(&mut lab),
        _ => cross_recording(&mut lab),
    }
}

const SETTINGS: [(&str, Setting, &str); 5] = [
    ("shuffled", Setting::Shuffled, "specaugment"),
    ("ordered", Setting::Ordered, "specaugment"),
    ("online", Setting::Online, "specaugment"),
    ("awmc", Setting::Awmc, "identity"),
    ("awmc_specaugment", Setting::Awmc, "specaugment"),
];

fn settings_table(lab: &mut Lab) -> Result<ExperimentReport> {
    let mut rows = Vec::new();
    let mut summary = BTreeMap::new();
    for split in [splits::TARGET_DEV, splits::TARGET_TEST] {
        let recs = lab.ws.split(split)?;
        let base_row = lab.unadapted_row(split, &recs)?;
        for (name, setting, transform) in SETTINGS {
            let (row, _) = lab.adapted_row(name, split, &recs, setting, transform)?;
            put(
                &mut summary,
                format!("werr.{name}.{split}"),
                row_werr(&base_row, &row, lab.opts.repeats),
            );
            rows.push(row);
        }
        rows.insert(rows.len() - SETTINGS.len(), base_row);
    }
    Ok(lab.report("settings_table", rows, Vec::new(), summary))
}

fn epoch_curve(lab: &mut Lab) -> Result<ExperimentReport> {
    let split = splits::TARGET_TEST;
    let recs = lab.ws.split(split)?;
    let base = lab.base.clone();
    let runs = lab.run_all(&base, &recs, Setting::Shuffled, "specaugment")?;
    lab.record_timing("shuffled", split, &runs, &recs);
    let repeats = lab.opts.repeats;
    let n = lab.opts.epochs;
    let mut rows = Vec::new();
    for e in 0..=n {
        let results = runs
            .iter()
            .map(|(r, o)| {
                let rec = if e == 0 {
                    &o.report.initial
                } else {
                    &o.report.epochs[e - 1]
                };
                RecordingResult {
                    recording_id: o.report.recording_id,
                    repeat: *r,
                    seed: o.report.config.seed,
                    wer: rec.wer,
                    blank_ratio: rec.blank_ratio,
                    skips: rec.skipped_empty + rec.skipped_infeasible,
                }
            })
            .collect();
        rows.push(condition_row(&format!("epoch_{e}"), split, results, repeats));
    }
    let x: Vec<f64> = (0..=n).map(|e| e as f64).collect();
    let metric = |name: &str, f: fn(&WerBreakdown) -> f64| {
        let per: Vec<(f64, Option<f64>)> = rows
            .iter()
            .map(|row| mean_std(&repeat_means(&row.recordings, repeats, |r| f(&r.wer))))
            .collect();
        Series {
            name: name.into(),
            x: x.clone(),
            y: per.iter().map(|p| p.0).collect(),
            stdev: per.iter().map(|p| p.1).collect(),
        }
    };
    fn ratio(c: usize, w: &WerBreakdown) -> f64 {
        c as f64 / w.reference_len.max(1) as f64
    }
    let series = vec![
        metric("wer", |w| w.wer),
        metric("substitutions", |w| ratio(w.substitutions, w)),
        metric("insertions", |w| ratio(w.insertions, w)),
        metric("deletions", |w| ratio(w.deletions, w)),
    ];
    let mut summary = BTreeMap::new();
    let wer = &series[0].y;
    for e in 1..=n {
        put(
            &mut summary,
            format!("werr.epoch_{e}"),
            row_werr(&rows[0], &rows[e], repeats),
        );
    }
    let total = wer[0] - wer[n];
    put(
        &mut summary,
        "first_epoch_share".into(),
        (total > 0.0).then(|| (wer[0] - wer[1]) / total),
    );
    Ok(lab.report("epoch_curve", rows, series, summary))
}

const TRANSFORMS: [&str; 4] = ["specaugment", "identity", "noise", "cutout"];

fn transform_table(lab: &mut Lab) -> Result<ExperimentReport> {
    let mut rows = Vec::new();
    let mut summary = BTreeMap::new();
    let repeats = lab.opts.repeats;
    for split in [splits::TARGET_TEST, splits::NOISY_TEST] {
        let recs = lab.ws.split(split)?;
        let base_row = lab.unadapted_row(split, &recs)?;
        summary.insert(format!("deletion_rate.unadapted.{split}"), base_row.mean_deletion_rate);
        summary.insert(format!("blank_ratio.unadapted.{split}"), base_row.mean_blank_ratio);
        rows.push(base_row.clone());
        for t in TRANSFORMS {
            let (row, _) = lab.adapted_row(t, split, &recs, Setting::Shuffled, t)?;
            put(
                &mut summary,
                format!("werr.{t}.{split}"),
                row_werr(&base_row, &row, repeats),
            );
            summary.insert(format!("blank_ratio.{t}.{split}"), row.mean_blank_ratio);
            rows.push(row);
        }
    }
    Ok(lab.report("transform_table", rows, Vec::new(), summary))
}

/// Consecutive excerpts of `factor` windows from each long recording
/// (`None` keeps whole recordings). Excerpt ids are unique per partition.
fn partition(recs: &[Recording], window: usize, factor: Option<usize>) -> Result<Vec<Recording>> {
    let mut out = Vec::new();
    for rec in recs {
        match factor {
            None => out.push(rec.clone()),
            Some(f) => {
                let len = f * window;
                for k in 0..rec.frames() / len {
                    let id = (rec.id << 24) | ((f as u64) << 12) | k as u64;
                    out.push(rec.excerpt(k * len, len, id)?);
                }
            }
        }
    }
    Ok(out)
}

fn duration_sweep(lab: &mut Lab) -> Result<ExperimentReport> {
    let split = splits::LONG_TEST;
    let long = lab.ws.split(split)?;
    let (window, _) = lab.corpus_window();
    let repeats = lab.opts.repeats;
    let shortest = long.iter().map(Recording::frames).min().unwrap_or(0);
    let mut parts: Vec<(String, Option<usize>, f64)> = DURATION_FACTORS
        .iter()
        .filter(|&&f| f * window <= shortest)
        .map(|&f| (format!("{f}x"), Some(f), f as f64))
        .collect();
    let mean_frames = long.iter().map(Recording::frames).sum::<usize>() as f64 / long.len() as f64;
    parts.push(("full".into(), None, mean_frames / window as f64));

    let mut rows = Vec::new();
    let mut summary = BTreeMap::new();
    let mut line = Series {
        name: "werr".into(),
        x: Vec::new(),
        y: Vec::new(),
        stdev: Some(Vec::new()),
    };
    for (label, factor, windows) in parts {
        let pieces = partition(&long, window, factor)?;
        let mut base_row = lab.unadapted_row(split, &pieces)?;
        base_row.condition = format!("unadapted.{label}");
        if let Some(t) = lab.timing.last_mut() {
            t.condition = base_row.condition.clone();
        }
        let (row, _) = lab.adapted_row(
            &format!("nsti.{label}"),
            split,
            &pieces,
            Setting::Shuffled,
            "specaugment",
        )?;
        // Pooled over the pieces of each repeat, so that short excerpts with
        // few symbols do not dominate.
        let pooled = |row: &ConditionRow, r: usize| {
            let parts: Vec<WerBreakdown> = row.recordings.iter().filter(|x| x.repeat == r).map(|x| x.wer).collect();
            WerBreakdown::pooled(&parts).wer
        };
        let gains: Vec<f64> = (0..repeats)
            .filter_map(|r| werr(pooled(&base_row, r), pooled(&row, r)).ok())
            .collect();
        if gains.len() == repeats {
            let (m, s) = mean_std(&gains);
            summary.insert(format!("werr.{label}"), m);
            put(&mut summary, format!("werr_stdev.{label}"), s);
            line.x.push(windows);
            line.y.push(m);
            if let Some(v) = line.stdev.as_mut() {
                v.push(s.unwrap_or(0.0));
            }
        }
        summary.insert(format!("wer.unadapted.{label}"), pooled(&base_row, 0));
        rows.push(base_row);
        rows.push(row);
    }
    if repeats < 2 {
        line.stdev = None;
    }
    Ok(lab.report("duration_sweep", rows, vec![line], summary))
}

#[derive(Serialize, Deserialize)]
struct CachedNst {
    dev_wer: Vec<f64>,
    best_epoch: usize,
}

/// Self-training on the adaptation split for one seed; returns the dev error
/// per epoch, the best epoch and its model. Cached like adaptation runs.
fn nst_cached(
    lab: &Lab,
    adapt_split: &[Recording],
    dev: &[Recording],
    config: &AdaptConfig,
) -> Result<(CachedNst, Checkpoint)> {
    let mut h = FnvHasher::default();
    h.write(b"nst/1");
    h.write_u64(lab.base.digest);
    for r in adapt_split.iter().chain(dev) {
        h.write_u64(recording_digest(r));
    }
    h.write(&serde_json::to_vec(config)?);
    let key = h.finish();
    let dir = lab.ws.cache_dir();
    let json = dir.join(format!("nst-{key:016x}.json"));
    let ckpt = dir.join(format!("nst-{key:016x}.ckpt"));
    if let (Ok(bytes), Ok(best)) = (fs::read(&json), Checkpoint::load(&ckpt)) {
        if let Ok(c) = serde_json::from_slice::<CachedNst>(&bytes) {
            return Ok((c, best));
        }
    }
    let snaps = lab
        .pool
        .install(|| adapt::nst_train(&lab.base.checkpoint, adapt_split, config, dev))?;
    let best = adapt::best_snapshot(&snaps).expect("snapshot 0 always exists");
    let cached = CachedNst {
        dev_wer: snaps.iter().map(|s| s.dev.wer).collect(),
        best_epoch: best.epoch,
    };
    write_atomic(&ckpt, &best.checkpoint.to_bytes()?)?;
    write_atomic(&json, &serde_json::to_vec(&cached)?)?;
    Ok((cached, best.checkpoint.clone()))
}

fn nst_vs_nsti(lab: &mut Lab) -> Result<ExperimentReport> {
    let adapt_split = lab.ws.split(splits::TARGET_ADAPT)?;
    let dev = lab.ws.split(splits::TARGET_DEV)?;
    let split = splits::TARGET_TEST;
    let test = lab.ws.split(split)?;
    let repeats = lab.opts.repeats;

    let base_row = lab.unadapted_row(split, &test)?;
    let (nsti_row, _) = lab.adapted_row("nsti", split, &test, Setting::Shuffled, "specaugment")?;

    let mut nst_results = Vec::new();
    let mut then_results = Vec::new();
    let mut dev_curves = Vec::new();
    let mut best_epochs = Vec::new();
    for (r, seed) in lab.opts.seeds().into_iter().enumerate() {
        let config = lab.config(Setting::Shuffled, "specaugment", seed)?;
        let (nst, best) = nst_cached(lab, &adapt_split, &dev, &config)?;
        dev_curves.push(nst.dev_wer);
        best_epochs.push(nst.best_epoch as f64);
        let (results, _) = lab.decoded_results(&best, &test)?;
        nst_results.extend(results.into_iter().filter(|x| x.repeat == r));
        let model = Model::new(best)?;
        let runs = lab.pool.install(|| {
            test.par_iter()
                .map(|rec| lab.run(&model, rec, &config))
                .collect::<Result<Vec<_>>>()
        })?;
        then_results.extend(runs.iter().map(|o| o.result(r)));
    }
    let nst_row = condition_row("nst", split, nst_results, repeats);
    let then_row = condition_row("nst_then_nsti", split, then_results, repeats);

    let mut summary = BTreeMap::new();
    put(&mut summary, "werr.nst".into(), row_werr(&base_row, &nst_row, repeats));
    put(
        &mut summary,
        "werr.nsti".into(),
        row_werr(&base_row, &nsti_row, repeats),
    );
    put(
        &mut summary,
        "werr.nst_then_nsti".into(),
        row_werr(&base_row, &then_row, repeats),
    );
    put(
        &mut summary,
        "werr.nsti_over_nst".into(),
        row_werr(&nst_row, &nsti_row, repeats),
    );
    summary.insert("nst.best_epoch".into(), mean(&best_epochs));
    let adapt_frames: usize = adapt_split.iter().map(Recording::frames).sum();
    let test_frames = test.iter().map(Recording::frames).sum::<usize>() as f64 / test.len() as f64;
    summary.insert("data_ratio".into(), adapt_frames as f64 / test_frames);

    let epochs = dev_curves[0].len();
    let per_epoch: Vec<(f64, Option<f64>)> = (0..epochs)
        .map(|e| mean_std(&dev_curves.iter().map(|c| c[e]).collect::<Vec<_>>()))
        .collect();
    let series = vec![Series {
        name: "nst_dev_wer".into(),
        x: (0..epochs).map(|e| e as f64).collect(),
        y: per_epoch.iter().map(|p| p.0).collect(),
        stdev: per_epoch.iter().map(|p| p.1).collect(),
    }];
    let rows = vec![base_row, nst_row, nsti_row, then_row];
    Ok(lab.report("nst_vs_nsti", rows, series, summary))
}

fn cross_recording(lab: &mut Lab) -> Result<ExperimentReport> {
    let split = splits::TARGET_TEST;
    let test = lab.ws.split(split)?;
    if test.len() < 2 {
        return Err(Error::Validation(
            "cross-recording transfer needs at least two test recordings".into(),
        ));
    }
    let repeats = lab.opts.repeats;
    let n = lab.opts.epochs;
    let base_row = lab.unadapted_row(split, &test)?;
    let (self_row, runs) = lab.adapted_row("self", split, &test, Setting::Shuffled, "specaugment")?;
    let (window, stride) = lab.corpus_window();
    let k = test.len();

    let mut epochs = vec![1, n];
    epochs.dedup();
    // (epoch, repeat, source a, target b)
    let tasks: Vec<(usize, usize, usize, usize)> = epochs
        .iter()
        .flat_map(|&e| (0..repeats).flat_map(move |r| (0..k).flat_map(move |a| (0..k).map(move |b| (e, r, a, b)))))
        .filter(|&(_, _, a, b)| a != b)
        .collect();
    let scored: Vec<(WerBreakdown, f64)> = lab.pool.install(|| {
        tasks
            .par_iter()
            .map(|&(e, r, a, b)| {
                let model = runs[r * k + a].1.snapshot(e)?;
                let lattice = transcribe_lattice(model, &normalize(&test[b].spectrogram), window, stride)?;
                Ok((wer(&test[b].reference, &greedy_decode(&lattice)), blank_ratio(&lattice)))
            })
            .collect::<Result<_>>()
    })?;

    let mut rows = vec![base_row.clone(), self_row.clone()];
    let mut summary = BTreeMap::new();
    for &e in &epochs {
        let mut results = Vec::new();
        for (r, seed) in lab.opts.seeds().into_iter().enumerate() {
            for (b, rec) in test.iter().enumerate() {
                let hits: Vec<&(WerBreakdown, f64)> = tasks
                    .iter()
                    .zip(&scored)
                    .filter(|((te, tr, _, tb), _)| *te == e && *tr == r && *tb == b)
                    .map(|(_, s)| s)
                    .collect();
                let parts: Vec<WerBreakdown> = hits.iter().map(|h| h.0).collect();
                results.push(RecordingResult {
                    recording_id: rec.id,
                    repeat: r,
                    seed,
                    wer: WerBreakdown::pooled(&parts),
                    blank_ratio: hits.iter().map(|h| h.1).sum::<f64>() / hits.len() as f64,
                    skips: 0,
                });
            }
        }
        let row = condition_row(&format!("cross_epoch_{e}"), split, results, repeats);
        put(
            &mut summary,
            format!("werr.cross_epoch_{e}"),
            row_werr(&base_row, &row, repeats),
        );
        rows.push(row);
    }
    put(
        &mut summary,
        "werr.self".into(),
        row_werr(&base_row, &self_row, repeats),
    );

    // Pairwise comparison at the last epoch, averaged over repeats.
    let own = |b: usize| {
        mean(
            &(0..repeats)
                .map(|r| runs[r * k + b].1.report.final_wer.wer)
                .collect::<Vec<_>>(),
        )
    };
    let mut worse = 0usize;
    let mut pairs = 0usize;
    for a in 0..k {
        for b in (0..k).filter(|&b| b != a) {
            let other: Vec<f64> = tasks
                .iter()
                .zip(&scored)
                .filter(|((te, _, ta, tb), _)| *te == n && *ta == a && *tb == b)
                .map(|(_, s)| s.0.wer)
                .collect();
            pairs += 1;
            if mean(&other) > own(b) {
                worse += 1;
            }
        }
    }
    summary.insert("pairs".into(), pairs as f64);
    summary.insert("worse_than_self_fraction".into(), worse as f64 / pairs as f64);
    Ok(lab.report("cross_recording", rows, Vec::new(), summary))
}
