use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::NdFloat;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point element type used by volumes, losses and the detector.
///
/// Implemented for `f32` (training builds) and `f64` (gradient checks and
/// reference computations).
pub trait Scalar:
    NdFloat + FromPrimitive + ToPrimitive + Default + Sum + Debug + Display + Send + Sync + 'static
{
    /// Name written into checkpoint headers.
    const DTYPE: &'static str;

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every float")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}
