//! Scalar abstraction: the numeric core is generic over f32/f64.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::distributions::uniform::SampleUniform;
use serde::{de::DeserializeOwned, Serialize};

/// Floating-point scalar usable everywhere in the crate: geometry, kernels,
/// optimization, sampling and (de)serialization.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + SampleUniform
    + Serialize
    + DeserializeOwned
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + Sum
        + SampleUniform
        + Serialize
        + DeserializeOwned
        + Debug
        + Display
        + Default
        + Send
        + Sync
        + 'static
{
}

/// Shorthand for lifting an `f64` literal into the generic scalar type.
#[inline]
pub(crate) fn fl<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("literal representable in scalar type")
}
