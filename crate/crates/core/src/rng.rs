//! Seeded random number generation.
//!
//! Every experiment draws from [`Xoshiro256PlusPlus`] seeded through
//! `seed_from_u64` (which expands the seed with SplitMix64). Streams derived
//! with [`derive`] are independent of the order in which sibling streams are
//! consumed.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
pub use rand_xoshiro::Xoshiro256PlusPlus as Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// A child stream for `(seed, tag)`.
pub fn derive(seed: u64, tag: &str) -> Rng {
    // FNV-1a over the tag, folded into the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

pub fn normal_vec(rng: &mut Rng, n: usize, std: f32) -> Vec<f32> {
    let dist = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
    (0..n).map(|_| dist.sample(rng)).collect()
}
