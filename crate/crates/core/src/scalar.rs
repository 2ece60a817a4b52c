//! Floating-point scalar abstraction.
//!
//! All tensor math in this crate is generic over [`Scalar`], which is
//! implemented for `f32` and `f64`. Training runs use `f32` for speed; the
//! gradient-verification suites instantiate the same code at `f64` so that
//! central finite differences have enough precision to be meaningful.

use ndarray::{NdFloat, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::distributions::uniform::SampleUniform;
use rand::Rng;
use rand_distr::StandardNormal;

/// Floating-point element type for all tensors in the crate.
///
/// Extends `ndarray`'s float requirements with conversions to/from `f64`
/// (used for configuration constants and metrics accumulation) and direct
/// standard-normal sampling.
pub trait Scalar:
    NdFloat + Float + FromPrimitive + SampleUniform + ScalarOperand + std::iter::Sum<Self> + 'static
{
    /// Converts an `f64` constant into this type. Panics only if the value is
    /// not representable, which cannot happen for finite configuration
    /// constants.
    fn from_f64c(x: f64) -> Self;

    /// Widens to `f64` for metrics and logging.
    fn to_f64c(self) -> f64;

    /// Draws one standard-normal sample.
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    fn from_f64c(x: f64) -> Self {
        x as f32
    }

    fn to_f64c(self) -> f64 {
        self as f64
    }

    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

impl Scalar for f64 {
    fn from_f64c(x: f64) -> Self {
        x
    }

    fn to_f64c(self) -> f64 {
        self
    }

    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

/// Shorthand for converting an `f64` constant to the working scalar type.
#[inline]
pub fn c<T: Scalar>(x: f64) -> T {
    T::from_f64c(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_conversion_round_trips() {
        assert_eq!(c::<f64>(0.25), 0.25);
        assert_eq!(c::<f32>(0.25), 0.25f32);
        assert_eq!(0.5f32.to_f64c(), 0.5);
    }

    #[test]
    fn std_normal_draws_differ_between_types_but_share_the_stream_contract() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = f64::std_normal(&mut rng);
        let b = f64::std_normal(&mut rng);
        assert!(a.is_finite() && b.is_finite());
        assert_ne!(a, b);
    }
}
