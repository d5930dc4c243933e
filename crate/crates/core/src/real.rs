use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;
use serde::{Deserialize, Serialize};

/// Floating-point precision of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

/// Scalar type networks and models are generic over (`f32` or `f64`).
pub trait Real:
    LinalgScalar
    + Float
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8>;
    fn from_le_chunk(chunk: &[u8]) -> Self;
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
    fn from_le_chunk(chunk: &[u8]) -> Self {
        f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"))
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
    fn from_le_chunk(chunk: &[u8]) -> Self {
        f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"))
    }
}
