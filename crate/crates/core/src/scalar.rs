//! Scalar abstraction for the numeric core.
//!
//! Geometry, autodiff and the sparse operators are generic over [`Scalar`]
//! so the same code runs in `f32` or `f64`. The pipeline itself is pinned
//! to `f64` (see the crate-root `Real` alias): training at desk scale is
//! cheap and double precision keeps the finite-difference gradient checks
//! tight.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + ScalarOperand
    + LinalgScalar
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Shorthand for embedding an `f64` literal into the scalar type.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
