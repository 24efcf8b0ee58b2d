//! Deterministic seed derivation.
//!
//! Every stochastic component takes a single `u64` seed and derives
//! independent streams from it, so results are reproducible across runs,
//! platforms, and thread counts.

use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates sequential stream indices.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed for stream `stream` at index `idx`.
pub(crate) fn derive(seed: u64, stream: u64, idx: u64) -> u64 {
    mix(seed ^ mix(stream.wrapping_mul(0x517c_c1b7_2722_0a95) ^ mix(idx)))
}

/// Seeded RNG for stream `stream`, index `idx`.
pub(crate) fn rng_for(seed: u64, stream: u64, idx: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(derive(seed, stream, idx))
}

/// Stream labels used across the crate; values are arbitrary but fixed.
pub(crate) mod stream {
    pub const TREE: u64 = 1;
    pub const DGP: u64 = 3;
    pub const KMEANS: u64 = 4;
    pub const ALLOC: u64 = 5;
    pub const SUBSAMPLE: u64 = 6;
}
