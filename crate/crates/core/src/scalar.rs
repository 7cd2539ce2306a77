//! Scalar abstraction for all real-valued math.
//!
//! Every tensor, neuron, and optimizer in this crate is generic over a
//! floating-point scalar so the same code runs in `f32` (the trained
//! artifact, checkpoints) and `f64` (finite-difference gradient checks).

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub trait Scalar:
    Float + NumAssignOps + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, used for config constants.
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable in scalar type")
    }

    /// Conversion to `f32` for on-disk storage (checkpoints, array exports).
    fn to_f32_s(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }

    fn from_f32_s(v: f32) -> Self {
        Self::from_f32(v).expect("f32 representable in scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
