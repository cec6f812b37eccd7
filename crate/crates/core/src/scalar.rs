//! Scalar abstraction: f32 or f64.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating point scalar the numeric core is generic over.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from f64, for config values and literals.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    /// Widening (or rounding) conversion to f64 for reporting.
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_f64_lossy(self) -> f64 {
        self
    }
}
