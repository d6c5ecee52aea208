use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, NumCast, ToPrimitive};

/// Floating-point scalar the model math is written against: `f32`, `f64`, or
/// a double-double type for reference computations.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; used for constants and parameter casts.
    #[inline]
    fn of(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + NumAssign
        + Debug
        + Display
        + Default
        + Send
        + Sync
        + 'static
{
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Sums in iteration order.
#[inline]
pub fn sum<T: Scalar>(xs: impl IntoIterator<Item = T>) -> T {
    xs.into_iter().fold(T::zero(), |a, x| a + x)
}
