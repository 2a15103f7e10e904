use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Scalar type the tape can run on. Inference and training use `f32`;
/// gradient checks rerun the same graph in `f64`.
///
/// Transcendentals go through `libm` so results do not depend on the host
/// C library.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + Sum + Debug + Default + Send + Sync + 'static
{
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp_det(self) -> Self;
    fn ln_1p_det(self) -> Self;
    fn ln_det(self) -> Self;
}

impl Real for f32 {
    fn from_f32(v: f32) -> Self {
        v
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp_det(self) -> Self {
        libm::expf(self)
    }
    fn ln_1p_det(self) -> Self {
        libm::log1pf(self)
    }
    fn ln_det(self) -> Self {
        libm::logf(self)
    }
}

impl Real for f64 {
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp_det(self) -> Self {
        libm::exp(self)
    }
    fn ln_1p_det(self) -> Self {
        libm::log1p(self)
    }
    fn ln_det(self) -> Self {
        libm::log(self)
    }
}

/// Logistic function, evaluated so it never overflows.
pub fn sigmoid<T: Real>(z: T) -> T {
    let one = T::one();
    if z >= T::zero() {
        one / (one + (-z).exp_det())
    } else {
        let e = z.exp_det();
        e / (one + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus<T: Real>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp_det().ln_1p_det()
}
