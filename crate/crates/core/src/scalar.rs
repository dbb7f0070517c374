//! Scalar abstraction so model code can run in f32 (training) or f64
//! (gradient verification) from a single implementation.

use num_traits::Float;

/// Floating-point element type for model arithmetic.
///
/// Geometry always runs in f64; encoder/loss/training code is generic over
/// `Scalar` and is instantiated with f32 for training and f64 for
/// finite-difference verification.
pub trait Scalar: Float + std::fmt::Debug + std::fmt::Display + Default + Copy + 'static {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn as_f32(self) -> f32;
    fn from_usize(x: usize) -> Self {
        Self::from_f64(x as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(x: f32) -> Self {
        x
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}
