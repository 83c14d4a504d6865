//! Seeded random streams.
//!
//! Every stochastic component draws from [`Xoshiro256PlusPlus`], seeded
//! through SplitMix64. Per-item streams (one per generated scan, one per
//! training run) are derived by mixing the base seed with an index, so that
//! the stream for item `i` does not depend on how many other items exist or
//! in which order they are produced.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

/// One SplitMix64 output step.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Stream for item `index` under `seed`.
pub fn stream(seed: u64, index: u64) -> Rng {
    let mixed = splitmix64(seed ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)));
    Rng::seed_from_u64(mixed)
}
