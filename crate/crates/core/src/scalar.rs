use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use serde::{de::DeserializeOwned, Serialize};

/// Floating-point scalar the whole pipeline is generic over.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + Sum
    + Serialize
    + DeserializeOwned
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(x: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
    /// Little-endian byte image, used for parameter fingerprints.
    fn push_le_bytes(self, out: &mut Vec<u8>);
}

impl Scalar for f32 {
    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    fn push_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Scalar for f64 {
    fn from_f64_lossy(x: f64) -> Self {
        x
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
    fn push_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

/// Shorthand for lifting an `f64` literal into the generic scalar type.
pub fn sc<F: Scalar>(x: f64) -> F {
    F::from_f64_lossy(x)
}
