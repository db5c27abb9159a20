//! Seed derivation. Every random draw in the crate comes from a ChaCha stream
//! whose seed is derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit mix (splitmix64 finalizer).
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed of sub-stream `index` from `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    mix(mix(master) ^ mix(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sub_rng(master: u64, index: u64) -> ChaCha8Rng {
    rng_from_seed(derive_seed(master, index))
}
