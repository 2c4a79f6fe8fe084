use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar the numerical core is written against (`f32` or `f64`).
///
/// Random draws, file I/O and the plant interface all go through `f64`, so a
/// network generated for `f32` is the exact rounding of its `f64` twin.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive {
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// Unit roundoff of the scalar type.
    fn epsilon() -> Self;
}

impl Real for f32 {
    fn epsilon() -> Self {
        f32::EPSILON
    }
}

impl Real for f64 {
    fn epsilon() -> Self {
        f64::EPSILON
    }
}
