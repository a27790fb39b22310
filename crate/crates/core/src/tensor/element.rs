use std::fmt::Debug;
use std::ops::{AddAssign, SubAssign};

/// Floating-point element type a [`super::Tensor`] can hold.
pub trait Element:
    num_traits::Float + AddAssign + SubAssign + Debug + Default + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Element for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}
