//! Test-time adaptation by pseudo-labelling: the noisy student-teacher loop
//! over the segments of one recording, its online and EMA-teacher variants,
//! and self-training on a separate adaptation set.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{normalize, Recording};
use crate::ctc::{blank_ratio, ctc_loss, greedy_decode, is_feasible};
use crate::diffcore::Tensor;
use crate::harness::metrics::{wer, WerBreakdown};
use crate::model::{Mode, ModelConfig, SUBSAMPLE};
use crate::optim::{self, OptimizerConfig};
use crate::transforms::{self, TransformSpec};
use crate::windowing::{self, Segment};
use crate::{rng, Checkpoint, Error, Graph, LogProbLattice, OptimizerState, Result, Spectrogram};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Shuffled,
    Ordered,
    Online,
    Awmc,
}

impl Setting {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shuffled" => Ok(Setting::Shuffled),
            "ordered" => Ok(Setting::Ordered),
            "online" => Ok(Setting::Online),
            "awmc" => Ok(Setting::Awmc),
            other => Err(Error::Usage(format!(
                "unknown setting {other:?}; expected shuffled, ordered, online or awmc"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Setting::Shuffled => "shuffled",
            Setting::Ordered => "ordered",
            Setting::Online => "online",
            Setting::Awmc => "awmc",
        }
    }

    pub fn single_pass(self) -> bool {
        matches!(self, Setting::Online | Setting::Awmc)
    }
}

pub const DEFAULT_EPOCHS: usize = 5;
pub const DEFAULT_LR: f64 = 3e-5;
pub const DEFAULT_COPIES: usize = 2;
pub const DEFAULT_EMA: f64 = 0.999;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub setting: Setting,
    pub transform: TransformSpec,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerConfig,
    pub copies: usize,
    pub ema_alpha: f64,
    pub seed: u64,
    pub window: usize,
    pub stride: f64,
}

impl AdaptConfig {
    /// Defaults for `setting` with SpecAugment-style frequency masking at
    /// `bins` bins; single-pass settings get one epoch.
    pub fn new(setting: Setting, bins: usize) -> Self {
        Self {
            setting,
            transform: TransformSpec::named("specaugment", bins).expect("known transform"),
            epochs: if setting.single_pass() { 1 } else { DEFAULT_EPOCHS },
            lr: DEFAULT_LR,
            optimizer: OptimizerConfig::madgrad(),
            copies: DEFAULT_COPIES,
            ema_alpha: DEFAULT_EMA,
            seed: 0,
            window: windowing::DEFAULT_WINDOW,
            stride: windowing::DEFAULT_STRIDE,
        }
    }

    pub fn validate(&self, bins: usize) -> Result<()> {
        if self.setting.single_pass() && self.epochs != 1 {
            return Err(Error::Validation(format!(
                "{} adaptation is a single pass; epochs must be 1, got {}",
                self.setting.name(),
                self.epochs
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Validation(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if self.copies == 0 {
            return Err(Error::Validation("copies must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(Error::Validation(format!(
                "ema alpha must lie in [0, 1], got {}",
                self.ema_alpha
            )));
        }
        if !self.window.is_multiple_of(SUBSAMPLE) || self.window == 0 {
            return Err(Error::Validation(format!(
                "window must be a positive multiple of {SUBSAMPLE}, got {}",
                self.window
            )));
        }
        self.optimizer.validate()?;
        self.transform.validate(bins)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    EmptyPseudoLabel,
    Infeasible,
}

/// What one student-teacher step did.
#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Updated { loss: f64, copy_losses: Vec<f64> },
    Skipped(SkipReason),
}

/// Gradient of the mean CTC loss of `copies` augmented views of `x` against
/// `labels`, plus the per-copy losses.
fn student_gradients(
    student: &Checkpoint,
    x: &Spectrogram,
    labels: &[usize],
    config: &AdaptConfig,
    r: &mut rng::Rng,
) -> Result<(Vec<Tensor<f64>>, Vec<f64>)> {
    let g = Graph::new();
    let params = student.bind(&g, true);
    let k = config.copies as f64;
    let mut root = None;
    let mut losses = Vec::with_capacity(config.copies);
    for _ in 0..config.copies {
        let view = transforms::apply(&config.transform, x, r)?;
        let xv = g.constant(view);
        let out = student.build(&g, &params, xv, Mode::TrainFrozenStats, student.limits())?;
        let lattice = LogProbLattice::new(g.value(out.log_probs).clone(), SUBSAMPLE)?;
        let ctc = ctc_loss(&lattice, labels)?;
        losses.push(ctc.loss);
        let grad = ctc.grad_logits.into_data().into_iter().map(|v| v / k).collect();
        let term = g.external_scalar(out.logits, ctc.loss / k, grad)?;
        root = Some(match root {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let root = root.expect("copies >= 1");
    let mut grads = g.backward(root)?;
    let tensors = params
        .iter()
        .zip(student.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    Ok((tensors, losses))
}

/// Trains `student` one step towards `labels` (already decoded by a teacher).
pub fn student_step(
    student: &mut Checkpoint,
    state: &mut OptimizerState,
    x: &Spectrogram,
    labels: &[usize],
    config: &AdaptConfig,
    r: &mut rng::Rng,
) -> Result<StepOutcome> {
    if labels.is_empty() {
        return Ok(StepOutcome::Skipped(SkipReason::EmptyPseudoLabel));
    }
    if !is_feasible(ModelConfig::output_frames(x.rows()), labels) {
        return Ok(StepOutcome::Skipped(SkipReason::Infeasible));
    }
    let (grads, copy_losses) = student_gradients(student, x, labels, config, r)?;
    let loss = copy_losses.iter().sum::<f64>() / copy_losses.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("student loss is {loss}")));
    }
    optim::step(&config.optimizer, student.params_mut(), &grads, state, config.lr)?;
    Ok(StepOutcome::Updated { loss, copy_losses })
}

/// One noisy student-teacher step on a segment: the model decodes the clean
/// segment, then trains on augmented copies towards that decode. Teacher and
/// student are the same parameters.
pub fn nsti_step(
    model: &mut Checkpoint,
    state: &mut OptimizerState,
    x: &Spectrogram,
    config: &AdaptConfig,
    r: &mut rng::Rng,
) -> Result<StepOutcome> {
    let labels = greedy_decode(&model.forward(x)?);
    student_step(model, state, x, &labels, config, r)
}

/// Eval-mode lattices of every segment. Runs on the current rayon pool;
/// results are in segment order whatever the pool size.
pub fn segment_lattices(model: &Checkpoint, segments: &[Segment<f64>]) -> Result<Vec<LogProbLattice>> {
    segments.par_iter().map(|s| model.forward(&s.spectrogram)).collect()
}

/// Overlapping-window transcription of a normalized spectrogram.
pub fn transcribe_lattice(model: &Checkpoint, x: &Spectrogram, window: usize, stride: f64) -> Result<LogProbLattice> {
    let segments = windowing::segment(x, window, stride, SUBSAMPLE)?;
    let lattices = segment_lattices(model, &segments)?;
    let pieces: Vec<(usize, LogProbLattice)> = segments
        .iter()
        .zip(lattices)
        .map(|(s, l)| (windowing::output_offset(s.start, SUBSAMPLE), l))
        .collect();
    windowing::stitch(&pieces)
}

/// Non-overlapping transcription (what the online settings see without
/// updates).
pub fn transcribe_chunked(model: &Checkpoint, x: &Spectrogram, window: usize) -> Result<LogProbLattice> {
    let chunks = windowing::chunk(x, window, SUBSAMPLE)?;
    windowing::concat(&segment_lattices(model, &chunks)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the unadapted model.
    pub epoch: usize,
    pub transcript: Vec<usize>,
    pub wer: WerBreakdown,
    pub blank_ratio: f64,
    pub steps: usize,
    pub skipped_empty: usize,
    pub skipped_infeasible: usize,
    /// Mean student loss over the updates of this epoch.
    pub mean_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub recording_id: u64,
    pub domain: String,
    pub config: AdaptConfig,
    pub frames: usize,
    pub segments: usize,
    pub segments_processed: usize,
    pub initial: EpochRecord,
    pub epochs: Vec<EpochRecord>,
    pub final_transcript: Vec<usize>,
    pub final_wer: WerBreakdown,
    /// Wall-clock seconds per epoch. Left out unless asked for, so that the
    /// report of a seeded run is reproducible byte for byte.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_s: Option<Vec<f64>>,
}

impl AdaptReport {
    pub fn total_skips(&self) -> usize {
        self.epochs.iter().map(|e| e.skipped_empty + e.skipped_infeasible).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Result of one adaptation run.
pub struct Adapted {
    pub report: AdaptReport,
    pub checkpoint: Checkpoint,
    /// Seconds spent per epoch, always measured.
    pub epoch_seconds: Vec<f64>,
}

#[derive(Default)]
struct Tally {
    steps: usize,
    empty: usize,
    infeasible: usize,
    loss_sum: f64,
    updates: usize,
}

impl Tally {
    fn record(&mut self, o: &StepOutcome) {
        self.steps += 1;
        match o {
            StepOutcome::Updated { loss, .. } => {
                self.loss_sum += loss;
                self.updates += 1;
            }
            StepOutcome::Skipped(SkipReason::EmptyPseudoLabel) => self.empty += 1,
            StepOutcome::Skipped(SkipReason::Infeasible) => self.infeasible += 1,
        }
    }

    fn finish(self, epoch: usize, lattice: &LogProbLattice, reference: &[usize]) -> EpochRecord {
        let transcript = greedy_decode(lattice);
        EpochRecord {
            epoch,
            wer: wer(reference, &transcript),
            transcript,
            blank_ratio: blank_ratio(lattice),
            steps: self.steps,
            skipped_empty: self.empty,
            skipped_infeasible: self.infeasible,
            mean_loss: (self.updates > 0).then(|| self.loss_sum / self.updates as f64),
        }
    }
}

fn check_recording(base: &Checkpoint, rec: &Recording, config: &AdaptConfig) -> Result<Spectrogram> {
    let bins = base.config().bins;
    if rec.bins() != bins {
        return Err(Error::Shape(format!(
            "recording has {} bins, model expects {bins}",
            rec.bins()
        )));
    }
    config.validate(bins)?;
    Ok(normalize(&rec.spectrogram))
}

/// Runs the adaptation configured by `config.setting`. Always starts from a
/// copy of `base`.
pub fn run(base: &Checkpoint, rec: &Recording, config: &AdaptConfig) -> Result<Adapted> {
    match config.setting {
        Setting::Shuffled | Setting::Ordered => nsti_run(base, rec, config),
        Setting::Online => online_run(base, rec, config),
        Setting::Awmc => awmc_run(base, rec, config),
    }
}

/// Multi-epoch adaptation over the overlapping segments of one recording,
/// followed by an eval pass stitched into the transcript.
pub fn nsti_run(base: &Checkpoint, rec: &Recording, config: &AdaptConfig) -> Result<Adapted> {
    nsti_run_with_snapshots(base, rec, config, &[]).map(|(a, _)| a)
}

/// [`nsti_run`] that also returns the model after each epoch in `keep`.
pub fn nsti_run_with_snapshots(
    base: &Checkpoint,
    rec: &Recording,
    config: &AdaptConfig,
    keep: &[usize],
) -> Result<(Adapted, Vec<(usize, Checkpoint)>)> {
    if config.setting.single_pass() {
        return Err(Error::Usage(format!(
            "nsti_run does not handle the {} setting",
            config.setting.name()
        )));
    }
    let x = check_recording(base, rec, config)?;
    let segments = windowing::segment(&x, config.window, config.stride, SUBSAMPLE)?;
    let mut model = base.clone();
    let mut state = OptimizerState::new();
    let mut order_rng = rng::stream(config.seed, &[rec.id, 0]);
    let mut aug_rng = rng::stream(config.seed, &[rec.id, 1]);

    let initial = Tally::default().finish(
        0,
        &transcribe_lattice(&model, &x, config.window, config.stride)?,
        &rec.reference,
    );
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut seconds = Vec::with_capacity(config.epochs);
    let mut snapshots = Vec::new();
    for epoch in 1..=config.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..segments.len()).collect();
        if config.setting == Setting::Shuffled {
            order.shuffle(&mut order_rng);
        }
        let mut tally = Tally::default();
        for i in order {
            let o = nsti_step(&mut model, &mut state, &segments[i].spectrogram, config, &mut aug_rng)?;
            tally.record(&o);
        }
        let lattice = transcribe_lattice(&model, &x, config.window, config.stride)?;
        epochs.push(tally.finish(epoch, &lattice, &rec.reference));
        seconds.push(t0.elapsed().as_secs_f64());
        if keep.contains(&epoch) {
            snapshots.push((epoch, model.clone()));
        }
    }
    Ok((
        finish(rec, config, segments.len(), initial, epochs, model, seconds),
        snapshots,
    ))
}

fn finish(
    rec: &Recording,
    config: &AdaptConfig,
    segments: usize,
    initial: EpochRecord,
    epochs: Vec<EpochRecord>,
    checkpoint: Checkpoint,
    epoch_seconds: Vec<f64>,
) -> Adapted {
    let last = epochs.last().unwrap_or(&initial);
    let report = AdaptReport {
        recording_id: rec.id,
        domain: rec.domain.clone(),
        config: config.clone(),
        frames: rec.frames(),
        segments,
        segments_processed: epochs.iter().map(|e| e.steps).sum(),
        final_transcript: last.transcript.clone(),
        final_wer: last.wer,
        initial,
        epochs,
        wall_clock_s: None,
    };
    Adapted {
        report,
        checkpoint,
        epoch_seconds,
    }
}

/// Single causal pass over non-overlapping chunks: each chunk is transcribed
/// by the current model before the model trains on it.
pub fn online_run(base: &Checkpoint, rec: &Recording, config: &AdaptConfig) -> Result<Adapted> {
    if config.setting != Setting::Online {
        return Err(Error::Usage("online_run needs the online setting".into()));
    }
    causal_run(base, rec, config, None)
}

/// Like [`online_run`], but predictions and pseudo-labels come from a
/// separate teacher that tracks the student as an exponential moving average
/// `θ_T ← α·θ_T + (1 − α)·θ_S` after every student step.
pub fn awmc_run(base: &Checkpoint, rec: &Recording, config: &AdaptConfig) -> Result<Adapted> {
    if config.setting != Setting::Awmc {
        return Err(Error::Usage("awmc_run needs the awmc setting".into()));
    }
    causal_run(base, rec, config, Some(config.ema_alpha))
}

fn causal_run(base: &Checkpoint, rec: &Recording, config: &AdaptConfig, ema: Option<f64>) -> Result<Adapted> {
    let x = check_recording(base, rec, config)?;
    let chunks = windowing::chunk(&x, config.window, SUBSAMPLE)?;
    let mut student = base.clone();
    let mut teacher = ema.map(|_| base.clone());
    let mut state = OptimizerState::new();
    let mut aug_rng = rng::stream(config.seed, &[rec.id, 1]);

    let initial = Tally::default().finish(0, &transcribe_chunked(base, &x, config.window)?, &rec.reference);
    let t0 = Instant::now();
    let mut tally = Tally::default();
    let mut pieces = Vec::with_capacity(chunks.len());
    for c in &chunks {
        let lattice = teacher.as_ref().unwrap_or(&student).forward(&c.spectrogram)?;
        let labels = greedy_decode(&lattice);
        pieces.push(lattice);
        let o = student_step(&mut student, &mut state, &c.spectrogram, &labels, config, &mut aug_rng)?;
        tally.record(&o);
        if let (Some(t), Some(alpha)) = (teacher.as_mut(), ema) {
            t.ema_update(&student, alpha);
        }
    }
    let record = tally.finish(1, &windowing::concat(&pieces)?, &rec.reference);
    let seconds = vec![t0.elapsed().as_secs_f64()];
    let model = teacher.unwrap_or(student);
    Ok(finish(rec, config, chunks.len(), initial, vec![record], model, seconds))
}

/// One snapshot of self-training on a separate adaptation set.
#[derive(Clone, Debug)]
pub struct NstSnapshot {
    pub epoch: usize,
    pub checkpoint: Checkpoint,
    pub dev: WerBreakdown,
}

/// Pooled token error of `model` on `recordings` with overlapping windows.
pub fn evaluate(model: &Checkpoint, recordings: &[Recording], window: usize, stride: f64) -> Result<WerBreakdown> {
    let parts = recordings
        .iter()
        .map(|r| {
            let lattice = transcribe_lattice(model, &normalize(&r.spectrogram), window, stride)?;
            Ok(wer(&r.reference, &greedy_decode(&lattice)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WerBreakdown::pooled(&parts))
}

/// Student-teacher self-training over the segments of a whole split
/// (shuffled across recordings every epoch), with a dev evaluation and a
/// snapshot after each epoch. Snapshot 0 is the base model.
pub fn nst_train(
    base: &Checkpoint,
    split: &[Recording],
    config: &AdaptConfig,
    dev: &[Recording],
) -> Result<Vec<NstSnapshot>> {
    if split.is_empty() {
        return Err(Error::Validation("self-training needs at least one recording".into()));
    }
    if config.setting.single_pass() {
        return Err(Error::Usage(
            "self-training runs the shuffled or ordered setting".into(),
        ));
    }
    let mut segments = Vec::new();
    for rec in split {
        let x = check_recording(base, rec, config)?;
        segments.extend(windowing::segment(&x, config.window, config.stride, SUBSAMPLE)?);
    }
    let mut model = base.clone();
    let mut state = OptimizerState::new();
    let mut order_rng = rng::stream(config.seed, &[0x6e7374, 0]);
    let mut aug_rng = rng::stream(config.seed, &[0x6e7374, 1]);
    let mut snapshots = vec![NstSnapshot {
        epoch: 0,
        checkpoint: model.clone(),
        dev: evaluate(&model, dev, config.window, config.stride)?,
    }];
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..segments.len()).collect();
        if config.setting == Setting::Shuffled {
            order.shuffle(&mut order_rng);
        }
        for i in order {
            nsti_step(&mut model, &mut state, &segments[i].spectrogram, config, &mut aug_rng)?;
        }
        snapshots.push(NstSnapshot {
            epoch,
            checkpoint: model.clone(),
            dev: evaluate(&model, dev, config.window, config.stride)?,
        });
    }
    Ok(snapshots)
}

/// The snapshot with the lowest dev error (earliest on ties).
pub fn best_snapshot(snapshots: &[NstSnapshot]) -> Option<&NstSnapshot> {
    snapshots
        .iter()
        .min_by(|a, b| a.dev.wer.total_cmp(&b.dev.wer).then(a.epoch.cmp(&b.epoch)))
}
