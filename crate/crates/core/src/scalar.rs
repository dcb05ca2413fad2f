//! Scalar abstraction shared by the numeric kernels (ranking, metrics,
//! acceptance tests, agreement statistics).
//!
//! Floating-point kernels are written against [`Scalar`]; the agreement
//! statistic only needs field arithmetic and also accepts exact rationals.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal, panicking only if the type cannot hold it.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    fn hundred() -> Self {
        Self::lit(100.0)
    }

    /// Clamps into `[lo, hi]`, mapping NaN to `lo`.
    fn clamp_to(self, lo: Self, hi: Self) -> Self {
        if self.is_nan() || self < lo {
            lo
        } else if self > hi {
            hi
        } else {
            self
        }
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut dot = S::zero();
    let mut na = S::zero();
    let mut nb = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    if na <= S::zero() || nb <= S::zero() {
        return S::zero();
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Converts an `f64` slice (wire representation) into a scalar vector.
pub fn from_wire<S: Scalar>(v: &[f64]) -> Vec<S> {
    v.iter().map(|&x| S::lit(x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_basic_cases() {
        assert_eq!(cosine(&[1.0f64, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine(&[1.0f64, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[0.0f64, 0.0], &[1.0, 1.0]), 0.0);
        assert!((cosine(&[1.0f32, 1.0], &[1.0, 1.0]) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn clamp_maps_nan_low() {
        assert_eq!(f64::NAN.clamp_to(0.0, 1.0), 0.0);
        assert_eq!(2.0f64.clamp_to(0.0, 1.0), 1.0);
        assert_eq!((-1.0f32).clamp_to(0.0, 1.0), 0.0);
    }
}
