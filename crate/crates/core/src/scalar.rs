//! Scalar abstraction for the numeric core.
//!
//! Everything that does per-pixel arithmetic is generic over [`Real`], so
//! the same code runs at `f32` or `f64`. Configuration structs stay plain
//! `f64`; values are cast at the boundary with [`real`].

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar usable by the numeric core.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Casts an `f64` configuration value into the working scalar type.
///
/// Panics only if the target type cannot represent any finite `f64`, which
/// cannot happen for the provided impls.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 converts to any Real impl")
}

/// Sums a slice by pairwise tree reduction.
///
/// The reduction order depends only on the slice length, never on worker
/// count or chunking, so totals are bit-stable across runs. Pairwise
/// summation also keeps rounding error logarithmic in the input size.
pub fn pairwise_sum<T: Real>(xs: &[T]) -> T {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        let mut acc = T::zero();
        for &x in xs {
            acc += x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}
