//! Scalar abstraction over the element types the numeric stack supports.
//!
//! Everything downstream (tensors, layers, training loops) is generic over
//! [`Scalar`] so the same code can train in `f32` and be verified against
//! finite differences in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssignOps, NumCast};

/// Tag identifying the concrete scalar type inside serialized artifacts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalarKind {
    F32,
    F64,
}

impl ScalarKind {
    pub fn code(self) -> u8 {
        match self {
            ScalarKind::F32 => 0,
            ScalarKind::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ScalarKind::F32),
            1 => Some(ScalarKind::F64),
            _ => None,
        }
    }
}

impl Display for ScalarKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScalarKind::F32 => write!(f, "f32"),
            ScalarKind::F64 => write!(f, "f64"),
        }
    }
}

/// Floating-point element type usable throughout the numeric stack.
pub trait Scalar:
    Float
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Send
    + Sync
    + Debug
    + Display
    + 'static
{
    const KIND: ScalarKind;
    /// Size of one element in serialized form.
    const BYTES: usize;

    fn from_f64(v: f64) -> Self {
        NumCast::from(v).expect("f64 -> scalar cast")
    }

    fn from_usize(v: usize) -> Self {
        NumCast::from(v).expect("usize -> scalar cast")
    }

    fn to_f64(self) -> f64 {
        NumCast::from(self).expect("scalar -> f64 cast")
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const KIND: ScalarKind = ScalarKind::F32;
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const KIND: ScalarKind = ScalarKind::F64;
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}
