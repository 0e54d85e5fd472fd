//! Per-example seed derivation.
//!
//! Every generated example and every augmentation draw gets its own RNG stream
//! derived from the master seed, so outputs do not depend on generation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a sequence of words (splitmix64 chaining).
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(GOLDEN, |acc, &p| {
        mix(acc.wrapping_add(GOLDEN) ^ mix(p.wrapping_add(GOLDEN)))
    })
}

pub fn example_rng(master_seed: u64, fold: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(&[master_seed, fold, index]))
}
