//! Scalar abstraction and seeded randomness helpers.
//!
//! All numeric kernels in this crate are generic over [`Real`], a thin
//! bundle of `num-traits` bounds implemented for `f32` and `f64`. The
//! crate-root aliases pin `f64` for the training stack and file formats;
//! the generic parameter exists so the kernels stay scalar-type-agnostic.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssignOps, ToPrimitive};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Floating-point scalar usable by every kernel in this crate.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into the working scalar type.
#[inline]
pub fn real<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("f64 literal must be representable in the scalar type")
}

/// Converts the working scalar back to `f64` for reporting.
#[inline]
pub fn to_f64<F: Real>(x: F) -> f64 {
    x.to_f64().expect("scalar must convert to f64")
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a root seed, a stream tag, and a
/// per-use index. Every consumer of randomness draws its seed through this
/// function so that changing one experiment axis never shifts another
/// stream's draws.
pub fn derive_seed(root: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ splitmix64(stream)) ^ splitmix64(index))
}

/// Stream tags for [`derive_seed`]. Arbitrary distinct constants.
pub mod streams {
    /// Parameter initialization.
    pub const INIT: u64 = 0x01;
    /// Minibatch shuffling, one index per epoch.
    pub const MINIBATCH: u64 = 0x02;
    /// Context-batch sampling.
    pub const CONTEXT: u64 = 0x03;
    /// Gaussian parameter perturbations for the divergence estimator.
    pub const PERTURB: u64 = 0x04;
    /// Gaussian parameter perturbations for the likelihood term.
    pub const PERTURB_LIK: u64 = 0x09;
    /// Per-gradient-step sub-root inside a training run.
    pub const STEP: u64 = 0x05;
    /// Data-fraction subsampling.
    pub const FRACTION: u64 = 0x06;
    /// Corruption operators applied to context draws.
    pub const CORRUPT: u64 = 0x07;
    /// Label-noise injection for synthetic tasks.
    pub const LABEL_NOISE: u64 = 0x08;
    /// Synthetic dataset generation (one index per dataset role).
    pub const DATASET: u64 = 0x0A;
}

/// Deterministic RNG used throughout the crate.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal draw, sampled in `f64` and converted, so that every
/// scalar type sees the same stream.
#[inline]
pub fn std_normal<F: Real, R: Rng + ?Sized>(rng: &mut R) -> F {
    real(rng.sample::<f64, _>(StandardNormal))
}

/// Uniform draw on `[low, high)`, sampled in `f64` and converted.
#[inline]
pub fn uniform<F: Real, R: Rng + ?Sized>(rng: &mut R, low: f64, high: f64) -> F {
    real(rng.random_range(low..high))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_is_deterministic_and_spread() {
        assert_eq!(derive_seed(7, streams::INIT, 0), derive_seed(7, streams::INIT, 0));
        assert_ne!(derive_seed(7, streams::INIT, 0), derive_seed(7, streams::INIT, 1));
        assert_ne!(derive_seed(7, streams::INIT, 0), derive_seed(7, streams::CONTEXT, 0));
        assert_ne!(derive_seed(7, streams::INIT, 0), derive_seed(8, streams::INIT, 0));
    }

    #[test]
    fn normal_stream_matches_across_scalar_types() {
        let mut a = rng_from_seed(3);
        let mut b = rng_from_seed(3);
        let x: f64 = std_normal(&mut a);
        let y: f32 = std_normal(&mut b);
        assert_eq!(x as f32, y);
    }
}
