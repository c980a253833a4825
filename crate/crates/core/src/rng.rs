//! Seed derivation and generator construction.
//!
//! Every stochastic routine in the crate takes an explicit `u64` seed. Work that
//! is split across threads derives one child seed per unit of work from
//! `(seed, index)`, so results depend only on the seed and never on the
//! schedule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Child seed for stream `index` of `seed`.
#[inline]
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix64(mix64(seed.wrapping_add(GOLDEN)) ^ index.wrapping_mul(GOLDEN).wrapping_add(0x632B_E59B_D9B4_E019))
}

/// Child seed for a path of stream indices.
pub fn derive_path(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(seed, |s, &i| derive_seed(s, i))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform value in `[0, 1)` addressed by a counter, without generator state.
#[inline]
pub fn counter_uniform(seed: u64, a: u64, b: u64) -> f64 {
    let h = mix64(derive_seed(seed, a) ^ mix64(b.wrapping_add(GOLDEN)));
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
