//! Scalar abstraction shared by every numerical routine in the crate.

use std::fmt::{Debug, Display, LowerExp};
use std::str::FromStr;

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real floating-point scalar usable by the mesh, density, network and
/// optimizer code. Implemented for `f32` and `f64`.
pub trait Real:
    RealField
    + Copy
    + FromPrimitive
    + ToPrimitive
    + Display
    + Debug
    + LowerExp
    + FromStr
    + Default
    + Send
    + Sync
    + 'static
{
    /// Machine epsilon of the type, widened.
    const EPSILON: f64;

    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self;

    /// Widening conversion for reporting and serialization.
    fn to_f64_lossy(self) -> f64;

    /// `true` when the value is neither NaN nor infinite.
    fn finite(self) -> bool {
        self.to_f64_lossy().is_finite()
    }
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const EPSILON: f64 = <$t>::EPSILON as f64;

            #[inline]
            fn lit(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn to_f64_lossy(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

/// Draws a standard-normal vector of length `n`.
pub fn standard_normal<T: Real, R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> nalgebra::DVector<T> {
    use rand_distr::{Distribution, StandardNormal};
    nalgebra::DVector::from_fn(n, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z)
    })
}
