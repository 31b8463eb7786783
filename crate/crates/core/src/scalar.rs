//! Scalar abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point type the tensors, backbone and samplers are generic over.
///
/// Random draws and schedule tables are produced in `f64` and narrowed with
/// [`Scalar::of`], so `f32` and `f64` runs consume identical random streams.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Short name recorded in manifests and weight files.
    const NAME: &'static str;

    fn of(value: f64) -> Self {
        Self::from_f64(value).expect("finite f64 converts to every Scalar")
    }

    fn of_usize(value: usize) -> Self {
        Self::from_usize(value).expect("usize converts to every Scalar")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}
