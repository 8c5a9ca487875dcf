//! Scalar abstraction shared by the information-theoretic numerics, the
//! pruning statistics and the reference forward pass.
//!
//! The checkpoint pipeline always runs in `f64`; `f32` is supported for
//! callers that want to trade precision for memory on small experiments.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real number type usable throughout the crate.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossless-or-rounding conversion from `f64`.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize is representable in every Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Tolerance used to absorb rounding at the edges of [0, 1].
    fn unit_guard() -> Self;

    /// Tolerance under which a negative mutual information is treated as zero.
    fn mi_guard() -> Self;
}

impl Scalar for f64 {
    fn unit_guard() -> Self {
        1e-9
    }

    fn mi_guard() -> Self {
        1e-12
    }
}

impl Scalar for f32 {
    // f32 rounding noise dwarfs the f64 guards.
    fn unit_guard() -> Self {
        1e-5
    }

    fn mi_guard() -> Self {
        1e-5
    }
}
