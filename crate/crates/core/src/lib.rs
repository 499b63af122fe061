//! Test-time adaptation of CTC acoustic models by noisy student-teacher
//! self-training on the recording being transcribed.
//!
//! The numeric kernels ([`diffcore`], [`ctc`], [`windowing`], [`transforms`],
//! [`optim`], [`model`]) are generic over the floating point type through
//! [`Scalar`]. The experiment machinery is fixed to `f64`; the aliases below
//! name the concrete types it uses.

pub mod adapt;
pub mod corpus;
pub mod ctc;
pub mod diffcore;
mod error;
pub mod harness;
pub mod model;
pub mod optim;
pub mod rng;
pub mod transforms;
pub mod windowing;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub use error::{Error, Result};

/// Floating point element type accepted by the generic kernels.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal; every literal used in this crate is representable.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense tensor over `f64`.
pub type Tensor = diffcore::Tensor<f64>;
/// Autodiff tape over `f64`.
pub type Graph = diffcore::Graph<f64>;
/// A `frames × bins` spectrogram.
pub type Spectrogram = diffcore::Tensor<f64>;
/// Per-frame log probabilities over the vocabulary plus blank.
pub type LogProbLattice = ctc::LogProbLattice<f64>;
/// Complete acoustic model state.
pub type Checkpoint = model::Checkpoint<f64>;
/// Optimizer accumulators for one parameter set.
pub type OptimizerState = optim::OptimizerState<f64>;
