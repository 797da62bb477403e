//! Minimal CPU neural-net stack: NHWC feature maps, im2col convolution,
//! batch norm, and the residual blocks the pod backbones are built from.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient verification.
//! Determinism contract: every floating-point accumulation happens in a fixed
//! order derived from data indices alone, and parallelism only ever splits
//! disjoint output regions, so parallel and sequential execution produce
//! bitwise-identical results.

pub mod layers;
pub mod tensor;

pub use layers::{BasicBlock, BatchNorm2d, Conv2d, FilterConv, Linear, Relu};
pub use tensor::{ConvGeom, Feat};

/// Scalar type the network runs on.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + core::ops::AddAssign
    + core::ops::SubAssign
    + core::ops::MulAssign
    + core::ops::DivAssign
    + core::iter::Sum
    + core::fmt::Debug
    + core::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lift an `f64` literal or coefficient into this type.
    fn lit(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("real converts to f64")
    }

    fn as_f32(self) -> f32 {
        num_traits::ToPrimitive::to_f32(&self).expect("real converts to f32")
    }
}

impl Real for f32 {}
impl Real for f64 {}
