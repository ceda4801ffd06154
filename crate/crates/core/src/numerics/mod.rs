//! Dense tensors, reverse-mode differentiation, and the optimizer.
//!
//! Everything is generic over [`Scalar`]: training runs in `f32`, gradient
//! verification in `f64`.

mod adamw;
pub mod gradcheck;
pub mod ops;
mod rng;
mod tape;
mod tensor;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use adamw::{AdamW, AdamWConfig, AdamWState};
pub use rng::Prng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Floating point element type of a [`Tensor`].
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[inline]
pub(crate) fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64_lossy(x)
}

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
