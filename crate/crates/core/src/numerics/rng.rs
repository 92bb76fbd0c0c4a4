//! Seedable randomness. One generator type is used everywhere so that a
//! fixed seed yields an identical sample stream on every run.

use ndarray::{Array1, Array2};
use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;

/// The pseudorandom generator used throughout the crate. ChaCha has a
/// stable, platform-independent stream for a given seed.
pub type Prng = rand_chacha::ChaCha8Rng;

/// Builds a generator from a 64-bit seed.
pub fn seed_rng(seed: u64) -> Prng {
    Prng::seed_from_u64(seed)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives an independent stream seed from a base seed plus context tags
/// (iteration number, task id, ...). Used so that parallel rollout
/// collection draws the same per-task streams as the serial path.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(base ^ 0xA076_1D64_78BD_642F);
    for &t in tags {
        s = splitmix64(s ^ t);
    }
    s
}

/// Vector of i.i.d. standard-normal draws.
pub fn standard_normal_vec(rng: &mut Prng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.sample(StandardNormal))
}

/// Matrix of i.i.d. standard-normal draws, filled row-major.
pub fn standard_normal_mat(rng: &mut Prng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}
