//! Supervised CTC training of the base model on the source domain.

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::evaluate;
use crate::corpus::{normalize, Recording};
use crate::ctc::{ctc_loss, is_feasible};
use crate::diffcore::Tensor;
use crate::harness::metrics::WerBreakdown;
use crate::model::{BatchStats, Mode, ModelConfig, RenormLimits, SUBSAMPLE};
use crate::optim::{self, OptimizerConfig};
use crate::transforms::{self, TransformSpec};
use crate::{rng, Checkpoint, Error, Graph, LogProbLattice, OptimizerState, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    /// Optimizer steps per epoch.
    pub steps_per_epoch: usize,
    /// Windows per step.
    pub batch: usize,
    pub window: usize,
    pub lr: f64,
    pub optimizer: OptimizerConfig,
    /// Applied in order to every training window.
    pub augment: Vec<TransformSpec>,
    /// Steps with plain batch normalization (r_max 1, d_max 0) before the
    /// clip limits ramp linearly to their configured values.
    pub renorm_warmup: usize,
    pub renorm_ramp: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 12,
            steps_per_epoch: 150,
            batch: 8,
            window: 96,
            lr: 2e-3,
            optimizer: OptimizerConfig::madgrad(),
            augment: vec![TransformSpec::freq_mask(2, 4)],
            renorm_warmup: 200,
            renorm_ramp: 400,
            patience: 3,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.batch == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Validation("batch and steps per epoch must be positive".into()));
        }
        if self.window == 0 || !self.window.is_multiple_of(SUBSAMPLE) {
            return Err(Error::Validation(format!(
                "window must be a positive multiple of {SUBSAMPLE}"
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Validation(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        for t in &self.augment {
            t.validate(self.model.bins)?;
        }
        Ok(())
    }

    fn limits(&self, step: usize) -> RenormLimits {
        let target = self.model.renorm;
        let frac = if step < self.renorm_warmup {
            0.0
        } else if self.renorm_ramp == 0 {
            1.0
        } else {
            ((step - self.renorm_warmup) as f64 / self.renorm_ramp as f64).min(1.0)
        };
        RenormLimits {
            r_max: 1.0 + frac * (target.r_max - 1.0),
            d_max: frac * target.d_max,
        }
    }
}

/// Dev error after each completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochSummary>,
    pub best_epoch: usize,
    pub best_dev: WerBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev: WerBreakdown,
}

struct Window {
    x: Tensor<f64>,
    labels: Vec<usize>,
}

fn draw_window(recs: &[(Tensor<f64>, &Recording)], window: usize, r: &mut rng::Rng) -> Window {
    let (x, rec) = recs.choose(r).expect("non-empty training split");
    let frames = x.rows();
    let len = window.min(frames);
    let slots = (frames - len) / SUBSAMPLE;
    let start = r.random_range(0..=slots) * SUBSAMPLE;
    Window {
        x: x.slice_rows(start, len).expect("in range"),
        labels: rec.labels_between(start, start + len),
    }
}

/// Loss, parameter gradients and batch statistics of one window.
fn window_gradients(
    model: &Checkpoint,
    w: &Window,
    limits: RenormLimits,
) -> Result<(f64, Vec<Tensor<f64>>, BatchStats<f64>)> {
    let g = Graph::new();
    let params = model.bind(&g, true);
    let xv = g.constant(w.x.clone());
    let out = model.build(&g, &params, xv, Mode::TrainUpdateStats, limits)?;
    let lattice = LogProbLattice::new(g.value(out.log_probs).clone(), SUBSAMPLE)?;
    let ctc = ctc_loss(&lattice, &w.labels)?;
    let root = g.external_scalar(out.logits, ctc.loss, ctc.grad_logits.into_data())?;
    let mut grads = g.backward(root)?;
    let tensors = params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    Ok((ctc.loss, tensors, out.batch_stats.unwrap_or_default()))
}

/// Trains from a fresh initialization and returns the checkpoint with the
/// lowest source-dev token error. Zero epochs return the initialization.
pub fn train_base(train: &[Recording], dev: &[Recording], config: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    config.validate()?;
    let mut model = Checkpoint::init(config.model.clone())?;
    let dev_error = |m: &Checkpoint| evaluate(m, dev, config.window, crate::windowing::DEFAULT_STRIDE);
    let initial = if dev.is_empty() {
        WerBreakdown::default()
    } else {
        dev_error(&model)?
    };
    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_dev: initial,
    };
    if config.epochs == 0 {
        return Ok((model, log));
    }
    if train.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    if let Some(r) = train.iter().chain(dev).find(|r| r.bins() != config.model.bins) {
        return Err(Error::Shape(format!(
            "recording {} has {} bins, model expects {}",
            r.id,
            r.bins(),
            config.model.bins
        )));
    }
    let data: Vec<(Tensor<f64>, &Recording)> = train.iter().map(|r| (normalize(&r.spectrogram), r)).collect();
    let mut best = model.clone();
    let mut state = OptimizerState::new();
    let mut r = rng::stream(config.seed, &[0x747261696e]);
    let mut step = 0usize;
    let mut stale = 0;
    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        let mut counted = 0usize;
        for _ in 0..config.steps_per_epoch {
            let mut batch = Vec::with_capacity(config.batch);
            while batch.len() < config.batch {
                let mut w = draw_window(&data, config.window, &mut r);
                for t in &config.augment {
                    w.x = transforms::apply(t, &w.x, &mut r)?;
                }
                if !w.labels.is_empty() && is_feasible(ModelConfig::output_frames(w.x.rows()), &w.labels) {
                    batch.push(w);
                }
            }
            let limits = config.limits(step);
            let results = batch
                .par_iter()
                .map(|w| window_gradients(&model, w, limits))
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / config.batch as f64;
            let mut total: Vec<Tensor<f64>> = model
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect();
            for (loss, grads, stats) in results {
                if !loss.is_finite() {
                    return Err(Error::Training(format!("loss became {loss} at step {step}")));
                }
                loss_sum += loss;
                counted += 1;
                for (t, g) in total.iter_mut().zip(grads) {
                    t.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += scale * b);
                }
                model.absorb_stats(&stats);
            }
            optim::step(&config.optimizer, model.params_mut(), &total, &mut state, config.lr)?;
            if model.params().iter().any(|p| p.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Training(format!("parameters diverged at step {step}")));
            }
            step += 1;
        }
        let dev = if dev.is_empty() {
            WerBreakdown::default()
        } else {
            dev_error(&model)?
        };
        log.epochs.push(EpochSummary {
            epoch,
            mean_loss: loss_sum / counted.max(1) as f64,
            dev,
        });
        if epoch == 1 || dev.wer < log.best_dev.wer {
            log.best_dev = dev;
            log.best_epoch = epoch;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok((best, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_templates, make_split, DomainConfig, UtteranceShape};

    fn tiny() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                hidden: 16,
                blocks: 1,
                ..ModelConfig::default()
            },
            epochs: 2,
            steps_per_epoch: 4,
            batch: 2,
            renorm_warmup: 2,
            renorm_ramp: 2,
            ..TrainConfig::default()
        }
    }

    fn data() -> (Vec<Recording>, Vec<Recording>) {
        let t = gen_templates(7, 8, 32, 6).unwrap();
        let s = DomainConfig::source(1);
        let train = make_split(&t, &s, "source", 3, 3, UtteranceShape::default()).unwrap();
        let dev = make_split(&t, &DomainConfig::source(2), "source", 1, 3, UtteranceShape::default()).unwrap();
        (train, dev)
    }

    #[test]
    fn zero_epochs_return_the_initialization() {
        let (train, dev) = data();
        let cfg = TrainConfig { epochs: 0, ..tiny() };
        let (m, log) = train_base(&train, &dev, &cfg).unwrap();
        assert_eq!(m, Checkpoint::init(cfg.model).unwrap());
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_updates_statistics() {
        let (train, dev) = data();
        let (a, la) = train_base(&train, &dev, &tiny()).unwrap();
        let (b, lb) = train_base(&train, &dev, &tiny()).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert_eq!(la, lb);
        assert!(a.updates > 0);
        assert!(la.epochs.iter().all(|e| e.mean_loss.is_finite()));
    }

    #[test]
    fn renorm_limits_ramp() {
        let cfg = TrainConfig {
            renorm_warmup: 10,
            renorm_ramp: 10,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.limits(0), RenormLimits { r_max: 1.0, d_max: 0.0 });
        assert_eq!(cfg.limits(15), RenormLimits { r_max: 2.0, d_max: 2.5 });
        assert_eq!(cfg.limits(100), RenormLimits { r_max: 3.0, d_max: 5.0 });
    }
}
