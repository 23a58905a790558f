//! Float abstraction so the network runs in f32 for speed and in f64 for
//! finite-difference gradient verification.

use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Element type of network tensors.
pub trait Scalar: NdFloat + FromPrimitive + Send + Sync + 'static {
    /// Type tag stored in checkpoints.
    const KIND: &'static str;

    fn from_double(v: f64) -> Self;
    fn to_double(self) -> f64;
}

impl Scalar for f32 {
    const KIND: &'static str = "f32";

    fn from_double(v: f64) -> Self {
        v as f32
    }
    fn to_double(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const KIND: &'static str = "f64";

    fn from_double(v: f64) -> Self {
        v
    }
    fn to_double(self) -> f64 {
        self
    }
}
