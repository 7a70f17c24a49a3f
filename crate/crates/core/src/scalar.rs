//! Floating point abstraction shared by every numerical module.

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, Signed, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// A real scalar the solvers can run on: `f32` or `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Signed
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Never fails for the supported types.
    fn lit(x: f64) -> Self;

    /// Widens to `f64` for statistics and serialization.
    fn as_f64(self) -> f64;

    /// Draws one standard normal variate.
    fn standard_normal<G: Rng + ?Sized>(rng: &mut G) -> Self;

    /// Relative rounding unit, used to scale tolerances.
    fn unit_roundoff() -> Self {
        Self::epsilon()
    }
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            #[inline]
            fn lit(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            #[inline]
            fn standard_normal<G: Rng + ?Sized>(rng: &mut G) -> Self {
                <StandardNormal as Distribution<$t>>::sample(&StandardNormal, rng)
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);
