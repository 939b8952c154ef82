//! Generic floating-point scalar used throughout the crate.

use nalgebra as na;
use num_traits as nt;

/// Scalar trait for all numerical routines: `f32` or `f64`.
///
/// Bundles the nalgebra field operations with the num-traits conversions
/// the solvers need. Concrete aliases for `f64` live at the crate root.
pub trait Real:
    na::RealField + Copy + nt::FromPrimitive + nt::ToPrimitive + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("literal not representable in scalar type")
    }

    /// Lossy conversion to `f64` (for reporting).
    fn to64(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
