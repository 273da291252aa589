//! Seed derivation and deterministic RNG construction.
//!
//! Every stochastic operation in the crate derives its stream from a u64 seed
//! through the mix functions here, so corpora, training runs and rollouts are
//! bit-reproducible and insertion-order independent.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer. Stated mix function for all derived seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over bytes; used to fold string tags (utt ids, stage names) into seeds.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a child seed from a parent seed and a string tag.
pub fn mix_tag(seed: u64, tag: &str) -> u64 {
    splitmix64(seed ^ fnv1a64(tag.as_bytes()))
}

/// Derive a child seed from a parent seed and an integer stream index.
pub fn mix_index(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

/// Deterministic RNG for a given seed.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
