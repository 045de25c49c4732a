//! Deterministic, splittable randomness.
//!
//! Every source of randomness in the crate is keyed by an explicit `u64`
//! seed; there is no global RNG state. Independent streams are derived by
//! hashing a parent seed with a string tag (and optionally an index), so a
//! single experiment seed fans out into reproducible per-component,
//! per-step, per-pass streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer. Fast, well-mixed u64 -> u64.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `(seed, tag)`.
pub fn child_seed(seed: u64, tag: &str) -> u64 {
    let mut h = seed ^ 0x51_7c_c1_b7_27_22_0a_95;
    for &b in tag.as_bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h)
}

/// Derive an indexed child seed from `(seed, tag, index)`.
pub fn child_seed_idx(seed: u64, tag: &str, index: u64) -> u64 {
    splitmix64(child_seed(seed, tag) ^ splitmix64(index))
}

/// Construct the stream cipher RNG for a seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
