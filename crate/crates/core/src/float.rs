//! Scalar abstraction so the numeric core runs at `f32` (training, inference)
//! and `f64` (gradient audits, oracles) from the same code.

use ndarray::NdFloat;
use num_traits::FromPrimitive;
use rand::distributions::uniform::SampleUniform;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point scalar usable throughout the model code.
pub trait Real: NdFloat + FromPrimitive + SampleUniform {
    /// Draw one standard-normal sample from `rng`.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Lossless-enough conversion for constants and report emission.
    fn from_f64(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite constant")
    }

    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn to_f64(self) -> f64 {
        self
    }
}

/// Shorthand for converting constants inside generic code.
#[inline]
pub fn c<F: Real>(x: f64) -> F {
    <F as Real>::from_f64(x)
}
