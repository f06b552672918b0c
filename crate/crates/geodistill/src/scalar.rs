//! Scalar abstraction for the dense math kernel.
//!
//! The tape and matrix types are generic over [`Scalar`]; the rest of the
//! pipeline uses the `f64` aliases exported from the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Norm guard used by cosine and row normalization.
    fn norm_eps() -> Self {
        Self::from_f64(1e-12).unwrap()
    }

    /// Probability clamp used by binary cross-entropy.
    fn bce_eps() -> Self {
        Self::from_f64(1e-7).unwrap()
    }

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
