//! Seeded randomness.
//!
//! Every random draw in the crate comes from [`ChaCha8Rng`], whose output
//! stream is fixed by its algorithm and independent of platform or pointer
//! width. Independent sub-streams are derived with a SplitMix64 mix of the
//! parent seed and a stream label, so adding a new consumer never shifts the
//! draws of an existing one.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// A generator seeded from a single 64-bit value.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sub-stream `stream` under `seed`.
pub fn derive(seed: u64, stream: u64) -> u64 {
    mix64(mix64(seed) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Generator for sub-stream `stream` under `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    seeded(derive(seed, stream))
}

/// Stream labels used across the crate. Keeping them in one place makes
/// collisions visible.
pub mod streams {
    pub const SCENE: u64 = 1;
    pub const SAMPLE: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const STEP: u64 = 5;
    pub const LABELS: u64 = 6;
    pub const INFER: u64 = 7;
    pub const SPLIT: u64 = 8;
}
