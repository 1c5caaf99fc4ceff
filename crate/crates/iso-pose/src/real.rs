//! Scalar abstraction for the dual-precision numeric paths.
//!
//! Production code runs in `f32`; gradient checking and the cycle oracle
//! run the same code in `f64` to separate algorithmic error from round-off.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Floating-point scalar usable by the tape engine, networks and geometry.
pub trait Real:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + ndarray::LinalgScalar
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn ln(self) -> Self;
    fn exp(self) -> Self;
    fn abs(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// Uniform sample in `[lo, hi)`.
    fn sample_uniform(rng: &mut ChaCha8Rng, lo: Self, hi: Self) -> Self;
    /// Standard normal sample.
    fn sample_normal(rng: &mut ChaCha8Rng) -> Self;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn sin(self) -> Self {
                <$t>::sin(self)
            }
            fn cos(self) -> Self {
                <$t>::cos(self)
            }
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            fn min(self, other: Self) -> Self {
                <$t>::min(self, other)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn sample_uniform(rng: &mut ChaCha8Rng, lo: Self, hi: Self) -> Self {
                if lo == hi {
                    return lo;
                }
                rng.random_range(lo..hi)
            }
            fn sample_normal(rng: &mut ChaCha8Rng) -> Self {
                rng.sample(rand_distr::StandardNormal)
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);
