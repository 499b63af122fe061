//! A small convolutional CTC acoustic model with batch renormalization.
//!
//! Architecture (`F` input bins, `H` hidden width, `B` blocks, `K` kernel,
//! `V` symbols plus one blank):
//!
//! ```text
//! x[T×F]
//!  → depthwise conv k=3 stride 2 → pointwise F→H (+bias) → SiLU      T/2
//!  → depthwise conv k=3 stride 2 → pointwise H→H (+bias) → SiLU      T/4
//!  → B × { h += W2·SiLU(W1·h + b1) + b2                 (H→2H→H)
//!          h += SiLU(BatchRenorm(depthwise conv k=K (h))) }
//!  → linear H→V+1 → log-softmax
//! ```
//!
//! Output frames are `ceil(T/4)`. Only the running statistics of the
//! renormalization layers distinguish the three forward modes: they are
//! updated in [`Mode::TrainUpdateStats`] and read-only otherwise.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::LogProbLattice;
use crate::diffcore::{Graph, Tensor, Var};
use crate::{rng, Error, Result, Scalar};

pub const SUBSAMPLE: usize = 4;
const SUBSAMPLE_KERNEL: usize = 3;
const CHECKPOINT_MAGIC: &[u8; 8] = b"NSTICKPT";
const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenormConfig {
    pub r_max: f64,
    pub d_max: f64,
    pub momentum: f64,
    pub eps: f64,
}

impl Default for RenormConfig {
    fn default() -> Self {
        Self {
            r_max: 3.0,
            d_max: 5.0,
            momentum: 0.99,
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub bins: usize,
    pub hidden: usize,
    pub blocks: usize,
    /// Number of symbols, excluding the blank.
    pub vocab: usize,
    pub kernel: usize,
    pub seed: u64,
    #[serde(default)]
    pub renorm: RenormConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            bins: 32,
            hidden: 64,
            blocks: 2,
            vocab: 8,
            kernel: 5,
            seed: 1,
            renorm: RenormConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.vocab < 2 {
            return fail(format!("vocabulary needs at least 2 symbols, got {}", self.vocab));
        }
        if self.hidden < 8 {
            return fail(format!("hidden width must be >= 8, got {}", self.hidden));
        }
        if self.blocks < 1 {
            return fail("at least one block is required".into());
        }
        if self.bins == 0 || self.kernel == 0 {
            return fail("bins and kernel must be positive".into());
        }
        let r = &self.renorm;
        if !(r.r_max >= 1.0 && r.d_max >= 0.0 && (0.0..1.0).contains(&r.momentum) && r.eps > 0.0) {
            return fail(format!("invalid renormalization settings {r:?}"));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.vocab + 1
    }

    /// Output frames for `frames` input frames.
    pub fn output_frames(frames: usize) -> usize {
        frames.div_ceil(SUBSAMPLE)
    }

    /// Parameter names, shapes and fan-in, in storage order.
    fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let (f, h, k, c) = (self.bins, self.hidden, self.kernel, self.classes());
        let sk = SUBSAMPLE_KERNEL;
        let mut l = vec![
            ("sub1.dw".to_string(), vec![sk, f], Init::Uniform(sk)),
            ("sub1.pw".to_string(), vec![f, h], Init::Uniform(f)),
            ("sub1.b".to_string(), vec![h], Init::Zero),
            ("sub2.dw".to_string(), vec![sk, h], Init::Uniform(sk)),
            ("sub2.pw".to_string(), vec![h, h], Init::Uniform(h)),
            ("sub2.b".to_string(), vec![h], Init::Zero),
        ];
        for b in 0..self.blocks {
            let p = |s: &str| format!("block{b}.{s}");
            l.push((p("ff1.w"), vec![h, 2 * h], Init::Uniform(h)));
            l.push((p("ff1.b"), vec![2 * h], Init::Zero));
            l.push((p("ff2.w"), vec![2 * h, h], Init::Uniform(2 * h)));
            l.push((p("ff2.b"), vec![h], Init::Zero));
            l.push((p("conv.dw"), vec![k, h], Init::Uniform(k)));
            l.push((p("bn.gamma"), vec![h], Init::One));
            l.push((p("bn.beta"), vec![h], Init::Zero));
        }
        l.push(("out.w".to_string(), vec![h, c], Init::Uniform(h)));
        l.push(("out.b".to_string(), vec![c], Init::Zero));
        l
    }

    /// Closed-form trainable parameter count:
    /// `3F + FH + H + 3H + H² + H + B(4H² + 5H + KH) + (H + 1)(V + 1)`.
    pub fn parameter_count(&self) -> usize {
        let (f, h, b, k, c) = (self.bins, self.hidden, self.blocks, self.kernel, self.classes());
        3 * f + f * h + h + 3 * h + h * h + h + b * (4 * h * h + 5 * h + k * h) + (h + 1) * c
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// `U(−s, s)` with `s = sqrt(1/fan_in)`.
    Uniform(usize),
    Zero,
    One,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Gradient pass that reads but never writes running statistics.
    TrainFrozenStats,
    /// Supervised base training: batch statistics, running stats updated.
    TrainUpdateStats,
    Eval,
}

/// Running mean and variance of one renormalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RenormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Clip limits for the renormalization correction factors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenormLimits {
    pub r_max: f64,
    pub d_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    stats: Vec<RenormStats<T>>,
    /// Number of statistics-updating forward passes seen.
    pub updates: u64,
}

/// Batch statistics produced by a [`Mode::TrainUpdateStats`] pass.
pub type BatchStats<T> = Vec<(Vec<T>, Vec<T>)>;

/// Result of building the model on a graph.
pub struct ForwardGraph<T> {
    pub logits: Var,
    pub log_probs: Var,
    /// Per-block batch statistics, present in [`Mode::TrainUpdateStats`].
    pub batch_stats: Option<BatchStats<T>>,
}

/// Batch renormalization of the columns of `x` (frames × channels).
///
/// With batch statistics: `x̂·r + d` where `r = clip(σ_B/σ, 1/r_max, r_max)`
/// and `d = clip((μ_B − μ)/σ, −d_max, d_max)` are constants for the
/// backward pass. Otherwise the running statistics normalise directly. Both
/// paths finish with the affine `γ·(·) + β`.
#[allow(clippy::too_many_arguments)]
pub fn batch_renorm<T: Scalar>(
    g: &Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: &RenormStats<T>,
    mode: Mode,
    limits: RenormLimits,
    eps: T,
) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
    if stats.var.iter().any(|&v| !(v > T::zero())) {
        return Err(Error::Numeric("running variance must be positive".into()));
    }
    let sigma: Vec<T> = stats.var.iter().map(|&v| (v + eps).sqrt()).collect();
    let (normed, batch) = match mode {
        Mode::TrainUpdateStats => {
            let (xhat, mu_b, var_b) = g.batch_norm_columns(x, eps)?;
            if mu_b.len() != sigma.len() {
                return Err(Error::Dimension {
                    op: "batch_renorm",
                    lhs: g.shape(x),
                    rhs: vec![sigma.len()],
                });
            }
            let (r_max, d_max) = (T::of(limits.r_max), T::of(limits.d_max));
            let r: Vec<T> = var_b
                .iter()
                .zip(&sigma)
                .map(|(&vb, &s)| ((vb + eps).sqrt() / s).max(T::one() / r_max).min(r_max))
                .collect();
            let d: Vec<T> = mu_b
                .iter()
                .zip(stats.mean.iter().zip(&sigma))
                .map(|(&mb, (&m, &s))| ((mb - m) / s).max(-d_max).min(d_max))
                .collect();
            (g.column_affine(xhat, r, &d)?, Some((mu_b, var_b)))
        }
        Mode::TrainFrozenStats | Mode::Eval => {
            let scale: Vec<T> = sigma.iter().map(|&s| T::one() / s).collect();
            let shift: Vec<T> = stats.mean.iter().zip(&scale).map(|(&m, &k)| -m * k).collect();
            (g.column_affine(x, scale, &shift)?, None)
        }
    };
    let y = g.mul_row(normed, gamma)?;
    Ok((g.add_row(y, beta)?, batch))
}

impl<T: Scalar> Checkpoint<T> {
    /// Fresh model with scaled-uniform weights, zero biases, unit gains and
    /// running statistics (0, 1).
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, &[0x6d6f_64656c]);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, init) in config.layout() {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Uniform(fan_in) => {
                    let s = (1.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| T::of(r.random_range(-s..s))).collect()
                }
                Init::Zero => vec![T::zero(); n],
                Init::One => vec![T::one(); n],
            };
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        let h = config.hidden;
        let stats = (0..config.blocks)
            .map(|_| RenormStats {
                mean: vec![T::zero(); h],
                var: vec![T::one(); h],
            })
            .collect();
        Ok(Self {
            config,
            names,
            params,
            stats,
            updates: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn stats(&self) -> &[RenormStats<T>] {
        &self.stats
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on `g` as a leaf.
    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.clone(), trainable)).collect()
    }

    /// Builds the forward pass for input `x` (frames × bins) on `g`.
    pub fn build(
        &self,
        g: &Graph<T>,
        params: &[Var],
        x: Var,
        mode: Mode,
        limits: RenormLimits,
    ) -> Result<ForwardGraph<T>> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.config.bins {
            return Err(Error::Shape(format!(
                "model expects frames×{} input, got {shape:?}",
                self.config.bins
            )));
        }
        if shape[0] == 0 {
            return Err(Error::Shape("empty input".into()));
        }
        if params.len() != self.params.len() {
            return Err(Error::Shape("parameter handles do not match the checkpoint".into()));
        }
        let eps = T::of(self.config.renorm.eps);
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("layout and handles agree");

        let mut h = x;
        for _ in 0..2 {
            let (dw, pw, b) = (next(), next(), next());
            let c = g.conv1d_depthwise(h, dw, 2)?;
            let c = g.matmul(c, pw)?;
            let c = g.add_row(c, b)?;
            h = g.silu(c);
        }
        let mut batch_stats = (mode == Mode::TrainUpdateStats).then(Vec::new);
        for block in 0..self.config.blocks {
            let (w1, b1, w2, b2, dw, gamma, beta) = (next(), next(), next(), next(), next(), next(), next());
            let f = g.matmul(h, w1)?;
            let f = g.add_row(f, b1)?;
            let f = g.silu(f);
            let f = g.matmul(f, w2)?;
            let f = g.add_row(f, b2)?;
            h = g.add(h, f)?;

            let c = g.conv1d_depthwise(h, dw, 1)?;
            let (c, batch) = batch_renorm(g, c, gamma, beta, &self.stats[block], mode, limits, eps)?;
            if let (Some(all), Some(b)) = (batch_stats.as_mut(), batch) {
                all.push(b);
            }
            let c = g.silu(c);
            h = g.add(h, c)?;
        }
        let (w, b) = (next(), next());
        let logits = g.matmul(h, w)?;
        let logits = g.add_row(logits, b)?;
        let log_probs = g.log_softmax(logits)?;
        Ok(ForwardGraph {
            logits,
            log_probs,
            batch_stats,
        })
    }

    pub fn limits(&self) -> RenormLimits {
        RenormLimits {
            r_max: self.config.renorm.r_max,
            d_max: self.config.renorm.d_max,
        }
    }

    /// Inference with running statistics; never modifies the checkpoint.
    pub fn forward(&self, x: &Tensor<T>) -> Result<LogProbLattice<T>> {
        let g = Graph::new();
        let params = self.bind(&g, false);
        let xv = g.constant(x.clone());
        let out = self.build(&g, &params, xv, Mode::Eval, self.limits())?;
        let lp = g.value(out.log_probs).clone();
        LogProbLattice::new(lp, SUBSAMPLE)
    }

    /// Forward in any mode; in [`Mode::TrainUpdateStats`] the running
    /// statistics absorb the batch statistics.
    pub fn forward_mode(&mut self, x: &Tensor<T>, mode: Mode) -> Result<LogProbLattice<T>> {
        let g = Graph::new();
        let params = self.bind(&g, false);
        let xv = g.constant(x.clone());
        let out = self.build(&g, &params, xv, mode, self.limits())?;
        if let Some(stats) = out.batch_stats {
            self.absorb_stats(&stats);
        }
        let lp = g.value(out.log_probs).clone();
        LogProbLattice::new(lp, SUBSAMPLE)
    }

    /// Exponential moving average update of the running statistics.
    pub fn absorb_stats(&mut self, batch: &[(Vec<T>, Vec<T>)]) {
        let m = T::of(self.config.renorm.momentum);
        let k = T::one() - m;
        for (st, (mu, var)) in self.stats.iter_mut().zip(batch) {
            for (r, &b) in st.mean.iter_mut().zip(mu) {
                *r = m * *r + k * b;
            }
            for (r, &b) in st.var.iter_mut().zip(var) {
                *r = m * *r + k * b;
            }
        }
        self.updates += 1;
    }

    /// `self ← α·self + (1 − α)·other` over trainable parameters.
    pub fn ema_update(&mut self, other: &Checkpoint<T>, alpha: f64) {
        let a = T::of(alpha);
        let b = T::one() - a;
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            for (x, &y) in p.data_mut().iter_mut().zip(q.data()) {
                *x = a * *x + b * y;
            }
        }
    }

    /// Serialises to the checkpoint byte format: magic, version byte, u32
    /// header length, JSON header, then little-endian f64 parameters followed
    /// by each block's running mean and variance.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            updates: self.updates,
            tensors: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(n, p)| TensorEntry {
                    name: n.clone(),
                    shape: p.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let values = self
            .params
            .iter()
            .flat_map(|p| p.data().iter())
            .chain(self.stats.iter().flat_map(|s| s.mean.iter().chain(&s.var)));
        for v in values {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut cur, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut version = [0u8; 1];
        read_exact(&mut cur, &mut version)?;
        if version[0] != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", version[0])));
        }
        let mut len = [0u8; 4];
        read_exact(&mut cur, &mut len)?;
        let len = u32::from_le_bytes(len) as usize;
        if cur.len() < len {
            return Err(Error::Format("truncated checkpoint header".into()));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&cur[..len]).map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
        cur = &cur[len..];
        header.config.validate()?;
        let expected = header.config.layout();
        if expected.len() != header.tensors.len()
            || expected
                .iter()
                .zip(&header.tensors)
                .any(|(e, t)| e.0 != t.name || e.1 != t.shape)
        {
            return Err(Error::Format(
                "tensor table does not match the configured architecture".into(),
            ));
        }
        let mut take = |n: usize| -> Result<Vec<T>> {
            let mut buf = vec![0u8; n * 8];
            read_exact(&mut cur, &mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
                .collect())
        };
        let mut names = Vec::new();
        let mut params = Vec::new();
        for t in &header.tensors {
            let n = t.shape.iter().product();
            params.push(Tensor::new(t.shape.clone(), take(n)?)?);
            names.push(t.name.clone());
        }
        let h = header.config.hidden;
        let mut stats = Vec::new();
        for _ in 0..header.config.blocks {
            let mean = take(h)?;
            let var = take(h)?;
            if var.iter().any(|&v| !(v > T::zero())) {
                return Err(Error::Format("running variance must be positive".into()));
            }
            stats.push(RenormStats { mean, var });
        }
        if !cur.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint payload",
                cur.len()
            )));
        }
        Ok(Self {
            config: header.config,
            names,
            params,
            stats,
            updates: header.updates,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?
            .read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn read_exact(cur: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    cur.read_exact(buf)
        .map_err(|_| Error::Format("truncated checkpoint".into()))
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    updates: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}
