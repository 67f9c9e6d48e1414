//! Scalar abstraction for the numerical core.
//!
//! Training normally runs in `f32`; the gradient checker and the metric
//! oracles run the same code paths in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar usable throughout the tensor/model/training code.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossless-enough conversion used by serialization and reporting.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 convertible to scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Default precision for training and inference.
pub type Real = f32;

/// Precision used by the finite-difference gradient checker.
pub type CheckReal = f64;
