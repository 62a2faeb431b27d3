//! Floating-point abstraction shared by the head math.
//!
//! Everything in the probit, classifier, box, and mask modules is written
//! against [`Scalar`]; training and the toy world instantiate it at `f64`.

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    fn erf(self) -> Self;

    /// Converts an `f64` literal. All literals used in this crate are representable.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f64 {
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

impl Scalar for f32 {
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

/// `ln(1 + e^x)` without overflow for large `x`.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::lit(30.0) {
        x
    } else if x < T::lit(-30.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`]: `ln(e^y - 1)`, for `y > 0`.
#[inline]
pub fn softplus_inv<T: Scalar>(y: T) -> T {
    if y > T::lit(30.0) {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_roundtrip() {
        for &y in &[1e-6, 0.1, 1.0, 5.0, 40.0] {
            let x = softplus_inv(y);
            assert!((softplus(x) - y).abs() <= 1e-12 * y.max(1.0), "{y}");
        }
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus(-1e3f64) >= 0.0);
    }

    #[test]
    fn erf_f32_and_f64_agree() {
        for i in -30..=30 {
            let x = i as f64 / 10.0;
            assert!((Scalar::erf(x as f32) as f64 - Scalar::erf(x)).abs() < 1e-6);
        }
    }
}
