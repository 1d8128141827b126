//! Dense numerics: a tensor-level reverse-mode tape, the Adam optimizer and
//! the flat binary checkpoint container.
//!
//! Values are `ndarray` arrays over a [`Real`] scalar (`f32` or `f64`). Every
//! primitive records itself on a [`Tape`]; [`Tape::gradients`] replays the
//! tape backward. The first non-finite value produced by any primitive is
//! remembered and surfaces as [`NumError::NonFinite`] naming that primitive.

mod adam;
mod checkpoint;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError};
pub use params::ParamSet;
pub use tape::{value_and_grad, Tape, Var};

use serde::{Deserialize, Serialize};
use std::fmt::{Debug, Display};

/// Dense n-dimensional array of reals.
pub type Tensor<R> = ndarray::ArrayD<R>;

/// Scalar precision of a tensor, stored in checkpoint headers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn flag(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn from_flag(flag: u8) -> Option<Self> {
        match flag {
            4 => Some(Precision::F32),
            8 => Some(Precision::F64),
            _ => None,
        }
    }
}

/// Real scalar the whole crate is generic over.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    /// Converts an `f64` literal.
    fn lit(x: f64) -> Self;

    fn f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Errors raised by numeric primitives and the optimizer.
#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumError {
    #[error("non-finite value produced by primitive `{op}`")]
    NonFinite { op: &'static str },
    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("objective is not a scalar (shape {0:?})")]
    NotScalar(Vec<usize>),
}
