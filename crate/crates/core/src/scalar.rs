//! Floating-point scalar abstraction.
//!
//! Everything numeric in this crate is generic over [`Scalar`] so the same
//! code runs at f32 or f64. Configuration structs keep their values as plain
//! `f64` (they are human-entered decimals); [`real`] converts them into the
//! working scalar at the point of use.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable by every routine in this crate.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Display + Debug + Send + Sync + 'static
{
    /// Round-trips through `f64`, the interchange precision used by all file
    /// formats. Exact for f64, widening/rounding for f32.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` constant or configuration value into the working scalar.
pub fn real<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("finite f64 representable in scalar type")
}
