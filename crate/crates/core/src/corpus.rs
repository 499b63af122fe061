//! Synthetic log-spectrogram recordings with controllable domain shift.
//!
//! Each symbol owns a template: a short time × frequency pattern built from a
//! few band-limited bumps with their own onsets. An utterance is a random
//! symbol string rendered by placing (time-jittered) templates back to back;
//! a recording is a run of utterances separated by silence. A domain adds a
//! spectral tilt, a gain, additive Gaussian noise and a per-recording drift
//! of every template. All nuisance draws are keyed by the domain seed and the
//! recording id, so the utterances of one recording share them.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::{rng, Error, Result, Spectrogram};

const TENSOR_MAGIC: &[u8; 4] = b"NSTI";
const TENSOR_VERSION: u8 = 1;
/// Log-domain values are clamped to this range after synthesis.
pub const VALUE_RANGE: (f64, f64) = (-4.0, 6.0);
pub const FRAMES_PER_SECOND: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SymbolTemplate {
    pub symbol: usize,
    /// `D frames × F bins`, values in `[0, 1]`.
    pub pattern: Tensor<f64>,
}

/// Fraction of entries where two patterns differ by more than 0.2.
pub fn separation(a: &SymbolTemplate, b: &SymbolTemplate) -> f64 {
    let n = a.pattern.len();
    a.pattern
        .data()
        .iter()
        .zip(b.pattern.data())
        .filter(|(x, y)| (*x - *y).abs() > 0.2)
        .count() as f64
        / n as f64
}

fn draw_template(r: &mut impl Rng, symbol: usize, bins: usize, frames: usize) -> Result<SymbolTemplate> {
    let mut data = vec![0.0; frames * bins];
    let bands = r.random_range(2..=3);
    for _ in 0..bands {
        let center = r.random_range(0.0..bins as f64);
        let width = r.random_range(0.8..2.5);
        let amp = r.random_range(0.6..1.0);
        let on = r.random_range(0..frames.div_ceil(2));
        let off = r.random_range(on + 1..=frames);
        for t in on..off {
            for f in 0..bins {
                let d = (f as f64 - center) / width;
                data[t * bins + f] += amp * (-0.5 * d * d).exp();
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(SymbolTemplate {
        symbol,
        pattern: Tensor::new(vec![frames, bins], data)?,
    })
}

fn template_ok(t: &SymbolTemplate, others: &[SymbolTemplate]) -> bool {
    t.pattern.data().iter().any(|&v| v > 0.5) && others.iter().all(|o| separation(t, o) >= 0.25)
}

/// `vocab` mutually separable templates of `frames × bins`.
pub fn gen_templates(seed: u64, vocab: usize, bins: usize, frames: usize) -> Result<Vec<SymbolTemplate>> {
    if vocab < 2 || bins < 8 || frames < 2 {
        return Err(Error::Validation(format!(
            "templates need V >= 2, F >= 8, D >= 2 (got {vocab}, {bins}, {frames})"
        )));
    }
    let mut out: Vec<SymbolTemplate> = Vec::with_capacity(vocab);
    for s in 0..vocab {
        let mut accepted = None;
        for attempt in 0..=100u64 {
            let mut r = rng::stream(seed, &[0x7465_6d70, s as u64, attempt]);
            let t = draw_template(&mut r, s, bins, frames)?;
            if template_ok(&t, &out) {
                accepted = Some(t);
                break;
            }
        }
        out.push(
            accepted
                .ok_or_else(|| Error::Generation(format!("symbol {s}: no separable template after 100 retries")))?,
        );
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    /// Additive log-spectral ramp per frequency bin.
    pub tilt: f64,
    pub noise_sigma: f64,
    /// Per-entry standard deviation of the per-recording template drift.
    pub drift_sigma: f64,
    pub gain: f64,
    pub seed: u64,
    /// Per-recording standard deviation around `tilt`.
    #[serde(default)]
    pub tilt_jitter: f64,
    /// Per-recording log-normal spread of `gain`.
    #[serde(default)]
    pub gain_jitter: f64,
    /// Channel roll-off: symbol energy at bin `f` is scaled by
    /// `exp(−rolloff·f/(F−1))`, so high bins fade out as it grows.
    #[serde(default)]
    pub rolloff: f64,
    /// Each placed symbol is scaled by `exp(−level_spread·u)`, `u ~ U(0, 1)`,
    /// so some words are spoken much more quietly than others.
    #[serde(default)]
    pub level_spread: f64,
}

impl DomainConfig {
    pub fn source(seed: u64) -> Self {
        Self {
            tilt: 0.0,
            noise_sigma: 0.05,
            drift_sigma: 0.0,
            gain: 1.0,
            seed,
            tilt_jitter: 0.0,
            gain_jitter: 0.0,
            rolloff: 0.0,
            level_spread: 0.0,
        }
    }

    pub fn target(seed: u64) -> Self {
        Self {
            tilt: 0.008,
            noise_sigma: 0.35,
            drift_sigma: 0.1,
            gain: 1.0,
            seed,
            tilt_jitter: 0.01,
            gain_jitter: 0.1,
            rolloff: 0.0,
            level_spread: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![
            self.noise_sigma,
            self.drift_sigma,
            self.tilt_jitter,
            self.gain_jitter,
            self.rolloff,
            self.level_spread,
        ]
        .iter()
        .all(|&v| v >= 0.0)
        {
            return Err(Error::Validation("domain spreads must be nonnegative".into()));
        }
        if !(self.gain > 0.0) {
            return Err(Error::Validation(format!("gain must be positive, got {}", self.gain)));
        }
        Ok(())
    }
}

/// Shape of the utterances making up a recording.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceShape {
    pub min_symbols: usize,
    pub max_symbols: usize,
    pub min_gap: usize,
    pub max_gap: usize,
    /// Symbol durations are the template length plus a jitter in `[-j, j]`.
    pub duration_jitter: usize,
}

impl Default for UtteranceShape {
    fn default() -> Self {
        Self {
            min_symbols: 4,
            max_symbols: 12,
            min_gap: 2,
            max_gap: 6,
            duration_jitter: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceSpan {
    pub start: usize,
    pub end: usize,
    pub labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub label: usize,
    pub start: usize,
    pub frames: usize,
}

impl Placement {
    pub fn center(&self) -> usize {
        self.start + self.frames / 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub id: u64,
    pub domain: String,
    pub spectrogram: Spectrogram,
    pub reference: Vec<usize>,
    pub spans: Vec<UtteranceSpan>,
    /// Frame placement of every reference symbol.
    pub symbols: Vec<Placement>,
    /// The seed all of this recording's draws derive from.
    pub seed: u64,
}

impl Recording {
    pub fn frames(&self) -> usize {
        self.spectrogram.rows()
    }

    pub fn bins(&self) -> usize {
        self.spectrogram.row_len()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.frames() as f64 / FRAMES_PER_SECOND
    }

    /// Labels of the symbols whose centre frame lies in `[start, end)`.
    pub fn labels_between(&self, start: usize, end: usize) -> Vec<usize> {
        self.symbols
            .iter()
            .filter(|p| (start..end).contains(&p.center()))
            .map(|p| p.label)
            .collect()
    }

    /// The leading `frames` frames as a recording of its own.
    pub fn truncated(&self, frames: usize) -> Result<Recording> {
        self.excerpt(0, frames.min(self.frames()), self.id)
    }

    /// Frames `[start, start + len)` as a recording with id `id`. Symbols
    /// whose centre falls inside are kept, with frame positions rebased.
    pub fn excerpt(&self, start: usize, len: usize, id: u64) -> Result<Recording> {
        let end = start + len;
        if len == 0 || end > self.frames() {
            return Err(Error::Validation(format!(
                "excerpt [{start}, {end}) outside a recording of {} frames",
                self.frames()
            )));
        }
        let inside = |p: &&Placement| (start..end).contains(&p.center());
        let symbols: Vec<Placement> = self
            .symbols
            .iter()
            .filter(inside)
            .map(|p| Placement {
                start: p.start.max(start) - start,
                frames: (p.start + p.frames).min(end) - p.start.max(start),
                ..*p
            })
            .collect();
        let spans = self
            .spans
            .iter()
            .filter(|s| s.start < end && s.end > start)
            .map(|s| UtteranceSpan {
                start: s.start.max(start) - start,
                end: s.end.min(end) - start,
                labels: self
                    .symbols
                    .iter()
                    .filter(inside)
                    .filter(|p| p.start >= s.start && p.start < s.end)
                    .map(|p| p.label)
                    .collect(),
            })
            .filter(|s| !s.labels.is_empty())
            .collect();
        Ok(Recording {
            id,
            domain: self.domain.clone(),
            spectrogram: self.spectrogram.slice_rows(start, len)?,
            reference: symbols.iter().map(|p| p.label).collect(),
            spans,
            symbols,
            seed: self.seed,
        })
    }
}

/// Template stretched (nearest neighbour in time) to `frames` frames.
fn stretched(pattern: &Tensor<f64>, frames: usize) -> Vec<&[f64]> {
    let d = pattern.rows();
    (0..frames).map(|j| pattern.row(j * d / frames)).collect()
}

/// Renders one recording of `n_utterances` utterances.
pub fn synth_recording(
    templates: &[SymbolTemplate],
    domain: &DomainConfig,
    domain_name: &str,
    n_utterances: usize,
    shape: UtteranceShape,
    id: u64,
) -> Result<Recording> {
    domain.validate()?;
    if n_utterances == 0 {
        return Err(Error::Validation("a recording needs at least one utterance".into()));
    }
    if shape.min_symbols == 0 || shape.min_symbols > shape.max_symbols || shape.min_gap > shape.max_gap {
        return Err(Error::Validation(format!("invalid utterance shape {shape:?}")));
    }
    let first = templates
        .first()
        .ok_or_else(|| Error::Validation("no templates".into()))?;
    let (base_frames, bins) = (first.pattern.rows(), first.pattern.row_len());
    if shape.duration_jitter >= base_frames {
        return Err(Error::Validation(
            "duration jitter must be shorter than a template".into(),
        ));
    }
    let vocab = templates.len();
    let normal = |r: &mut rng::Rng| -> f64 { StandardNormal.sample(r) };

    let seed = rng::derive_seed(domain.seed, &[id]);
    let mut nuisance = rng::stream(seed, &[0]);
    let tilt = domain.tilt + domain.tilt_jitter * normal(&mut nuisance);
    let gain = domain.gain * (domain.gain_jitter * normal(&mut nuisance)).exp();
    let drifted: Vec<Tensor<f64>> = templates
        .iter()
        .map(|t| {
            t.pattern
                .map(|v| (v + domain.drift_sigma * normal(&mut nuisance)).clamp(0.0, 1.0))
        })
        .collect();

    let mut content = rng::stream(seed, &[1]);
    let mut symbols = Vec::new();
    let mut spans = Vec::new();
    let mut t = content.random_range(shape.min_gap..=shape.max_gap);
    for _ in 0..n_utterances {
        let len = content.random_range(shape.min_symbols..=shape.max_symbols);
        let start = t;
        let mut labels = Vec::with_capacity(len);
        for _ in 0..len {
            let label = content.random_range(0..vocab);
            let j = shape.duration_jitter as i64;
            let frames = (base_frames as i64 + content.random_range(-j..=j)) as usize;
            symbols.push(Placement {
                label,
                start: t,
                frames,
            });
            labels.push(label);
            t += frames;
        }
        spans.push(UtteranceSpan { start, end: t, labels });
        t += content.random_range(shape.min_gap..=shape.max_gap);
    }
    let total = t;

    let mut data = vec![0.0; total * bins];
    for p in &symbols {
        let level = (-domain.level_spread * content.random::<f64>()).exp();
        for (k, row) in stretched(&drifted[p.label], p.frames).into_iter().enumerate() {
            let dst = &mut data[(p.start + k) * bins..(p.start + k + 1) * bins];
            dst.iter_mut().zip(row).for_each(|(d, &v)| *d += level * v);
        }
    }
    let (lo, hi) = VALUE_RANGE;
    let channel: Vec<f64> = (0..bins)
        .map(|f| gain * (-domain.rolloff * f as f64 / (bins - 1) as f64).exp())
        .collect();
    for (i, v) in data.iter_mut().enumerate() {
        let f = i % bins;
        *v = (channel[f] * *v + tilt * f as f64 + domain.noise_sigma * normal(&mut content)).clamp(lo, hi);
    }

    Ok(Recording {
        id,
        domain: domain_name.to_string(),
        spectrogram: Tensor::new(vec![total, bins], data)?,
        reference: symbols.iter().map(|p| p.label).collect(),
        spans,
        symbols,
        seed,
    })
}

/// `n_recordings` recordings with ids `0..n`.
pub fn make_split(
    templates: &[SymbolTemplate],
    domain: &DomainConfig,
    domain_name: &str,
    n_recordings: usize,
    utterances: usize,
    shape: UtteranceShape,
) -> Result<Vec<Recording>> {
    if n_recordings == 0 {
        return Err(Error::Validation("a split needs at least one recording".into()));
    }
    (0..n_recordings as u64)
        .map(|id| synth_recording(templates, domain, domain_name, utterances, shape, id))
        .collect()
}

/// Zero-mean, unit-variance scaling over the whole recording.
pub fn normalize(x: &Spectrogram) -> Spectrogram {
    let n = x.len().max(1) as f64;
    let mean = x.data().iter().sum::<f64>() / n;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var.sqrt() + 1e-8);
    x.map(|v| (v - mean) * inv)
}

// ---------------------------------------------------------------------------
// On-disk corpus

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingMeta {
    pub id: u64,
    pub domain: String,
    pub seed: u64,
    pub frames: usize,
    pub bins: usize,
    pub reference: Vec<usize>,
    pub spans: Vec<UtteranceSpan>,
    pub symbols: Vec<Placement>,
}

/// Encodes a spectrogram as `NSTI`, version byte, u32 T, u32 F, f64 LE data.
pub fn encode_spectrogram(x: &Spectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + x.len() * 8);
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.extend_from_slice(&(x.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(x.row_len() as u32).to_le_bytes());
    for v in x.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_spectrogram(bytes: &[u8]) -> Result<Spectrogram> {
    if bytes.len() < 13 || &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::Format("not a spectrogram file (bad magic)".into()));
    }
    if bytes[4] != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported spectrogram version {}", bytes[4])));
    }
    let t = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let f = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
    let payload = &bytes[13..];
    if payload.len() != t * f * 8 {
        return Err(Error::Format(format!(
            "spectrogram payload holds {} bytes, header promises {}",
            payload.len(),
            t * f * 8
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(vec![t, f], data)
}

fn stem(id: u64) -> String {
    format!("rec_{id:04}")
}

pub fn write_recording(dir: &Path, rec: &Recording) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let bin = dir.join(format!("{}.bin", stem(rec.id)));
    fs::File::create(&bin)?.write_all(&encode_spectrogram(&rec.spectrogram))?;
    let meta = RecordingMeta {
        id: rec.id,
        domain: rec.domain.clone(),
        seed: rec.seed,
        frames: rec.frames(),
        bins: rec.bins(),
        reference: rec.reference.clone(),
        spans: rec.spans.clone(),
        symbols: rec.symbols.clone(),
    };
    fs::write(
        dir.join(format!("{}.json", stem(rec.id))),
        serde_json::to_vec_pretty(&meta)?,
    )?;
    Ok(bin)
}

/// Reads a recording from its `.bin` path (the `.json` sidecar sits next to it).
pub fn read_recording(bin: &Path) -> Result<Recording> {
    let bytes = fs::read(bin).map_err(|e| Error::MissingArtifact(format!("{}: {e}", bin.display())))?;
    let spectrogram = decode_spectrogram(&bytes)?;
    let sidecar = bin.with_extension("json");
    let meta: RecordingMeta = serde_json::from_slice(
        &fs::read(&sidecar).map_err(|e| Error::MissingArtifact(format!("{}: {e}", sidecar.display())))?,
    )
    .map_err(|e| Error::Format(format!("{}: {e}", sidecar.display())))?;
    if meta.frames != spectrogram.rows() || meta.bins != spectrogram.row_len() {
        return Err(Error::Format(format!(
            "{}: metadata disagrees with tensor shape",
            sidecar.display()
        )));
    }
    Ok(Recording {
        id: meta.id,
        domain: meta.domain,
        spectrogram,
        reference: meta.reference,
        spans: meta.spans,
        symbols: meta.symbols,
        seed: meta.seed,
    })
}

/// Parameters of one split of a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub domain_name: String,
    pub domain: DomainConfig,
    pub recordings: usize,
    pub utterances: usize,
}

/// Everything needed to regenerate a corpus; stored as `corpus.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub vocab: usize,
    pub bins: usize,
    pub symbol_frames: usize,
    pub shape: UtteranceShape,
    pub splits: BTreeMap<String, SplitConfig>,
}

/// Names of the splits in the reference corpus.
pub mod splits {
    pub const SOURCE_TRAIN: &str = "source_train";
    pub const SOURCE_DEV: &str = "source_dev";
    pub const TARGET_ADAPT: &str = "target_adapt";
    pub const TARGET_DEV: &str = "target_dev";
    pub const TARGET_TEST: &str = "target_test";
    pub const NOISY_TEST: &str = "noisy_test";
    pub const LONG_TEST: &str = "long_test";
}

/// Mean frames per utterance under `shape` (symbols plus trailing gap).
pub fn mean_utterance_frames(shape: &UtteranceShape, symbol_frames: usize) -> f64 {
    let syms = (shape.min_symbols + shape.max_symbols) as f64 / 2.0;
    let gap = (shape.min_gap + shape.max_gap) as f64 / 2.0;
    syms * symbol_frames as f64 + gap
}

/// Length of the long recordings, in default windows.
pub const LONG_WINDOWS: usize = 32;

/// Knobs exposed by `gen-corpus`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusOptions {
    pub seed: u64,
    /// Recordings in each target evaluation split.
    pub recordings: usize,
    /// Approximate frames per target evaluation recording.
    pub frames: usize,
    pub target_tilt: f64,
    pub target_noise: f64,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            seed: 17,
            recordings: 4,
            frames: 2400,
            target_tilt: 0.008,
            target_noise: 0.35,
        }
    }
}

impl CorpusConfig {
    pub fn reference(opts: &CorpusOptions) -> Self {
        let shape = UtteranceShape::default();
        let symbol_frames = 12;
        let per_utt = mean_utterance_frames(&shape, symbol_frames);
        let utts = |frames: usize| ((frames as f64 / per_utt).round() as usize).max(1);
        let seed = opts.seed;
        let dseed = |tag: u64| rng::derive_seed(seed, &[0x646f6d, tag]);
        let source = |tag| DomainConfig::source(dseed(tag));
        let target = |tag| DomainConfig {
            tilt: opts.target_tilt,
            noise_sigma: opts.target_noise,
            ..DomainConfig::target(dseed(tag))
        };
        let noisy = |tag| DomainConfig {
            tilt: 0.0,
            noise_sigma: 0.55,
            gain: 0.5,
            ..DomainConfig::target(dseed(tag))
        };
        let split = |name: &str, domain_name: &str, domain: DomainConfig, recordings, utterances| {
            (
                name.to_string(),
                SplitConfig {
                    domain_name: domain_name.into(),
                    domain,
                    recordings,
                    utterances,
                },
            )
        };
        let eval = utts(opts.frames);
        let splits = [
            split(splits::SOURCE_TRAIN, "source", source(1), 48, 20),
            split(splits::SOURCE_DEV, "source", source(2), 4, 20),
            split(splits::TARGET_ADAPT, "target", target(3), 12, eval),
            split(
                splits::TARGET_DEV,
                "target",
                target(4),
                opts.recordings.clamp(1, 3),
                eval,
            ),
            split(splits::TARGET_TEST, "target", target(5), opts.recordings, eval),
            split(splits::NOISY_TEST, "noisy", noisy(6), opts.recordings.clamp(1, 3), eval),
            split(
                splits::LONG_TEST,
                "target",
                target(7),
                2,
                utts(LONG_WINDOWS * crate::windowing::DEFAULT_WINDOW),
            ),
        ]
        .into_iter()
        .collect();
        Self {
            seed,
            vocab: 8,
            bins: 32,
            symbol_frames,
            shape,
            splits,
        }
    }

    pub fn templates(&self) -> Result<Vec<SymbolTemplate>> {
        gen_templates(self.seed, self.vocab, self.bins, self.symbol_frames)
    }

    pub fn generate_split(&self, name: &str) -> Result<Vec<Recording>> {
        let s = self
            .splits
            .get(name)
            .ok_or_else(|| Error::Usage(format!("corpus has no split {name:?}")))?;
        make_split(
            &self.templates()?,
            &s.domain,
            &s.domain_name,
            s.recordings,
            s.utterances,
            self.shape,
        )
    }
}

/// Generates every split and writes it under `out`, with `corpus.json`.
pub fn write_corpus(config: &CorpusConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let templates = config.templates()?;
    for (name, s) in &config.splits {
        let recs = make_split(
            &templates,
            &s.domain,
            &s.domain_name,
            s.recordings,
            s.utterances,
            config.shape,
        )?;
        for r in &recs {
            write_recording(&out.join(name), r)?;
        }
    }
    fs::write(out.join("corpus.json"), serde_json::to_vec_pretty(config)?)?;
    Ok(())
}

pub fn read_corpus_config(dir: &Path) -> Result<CorpusConfig> {
    let p = dir.join("corpus.json");
    let bytes = fs::read(&p).map_err(|e| Error::MissingArtifact(format!("{}: {e}", p.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
}

/// Loads every recording of a split, ordered by id.
pub fn read_split(dir: &Path, name: &str) -> Result<Vec<Recording>> {
    let d = dir.join(name);
    let mut bins: Vec<PathBuf> = fs::read_dir(&d)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", d.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    bins.sort();
    bins.iter().map(|p| read_recording(p)).collect()
}
