//! Numeric traits the probability code is written against.
//!
//! Failure probabilities only need field arithmetic and ordering, so the
//! replication formulas run unchanged over `f32`, `f64` and exact rationals
//! such as `Ratio<i128>`. The anomaly forest needs real geometry (random cut
//! positions inside bounding boxes) and is bounded on [`Real`] instead.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, Num, ToPrimitive};

/// A probability-valued scalar: `f32`, `f64`, or an exact rational.
pub trait Probability: Num + Copy + PartialOrd + FromPrimitive + Debug + Send + Sync {
    fn from_count(n: u64) -> Self {
        Self::from_u64(n).expect("count representable in scalar")
    }

    fn ratio(num: u64, den: u64) -> Self {
        Self::from_count(num) / Self::from_count(den)
    }
}

impl<T> Probability for T where T: Num + Copy + PartialOrd + FromPrimitive + Debug + Send + Sync {}

/// A floating-point scalar usable for bounding-box geometry.
pub trait Real: Float + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static {}

impl<T> Real for T where T: Float + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static {}
