//! Seeded RNG construction.
//!
//! Every stochastic component takes an explicit `u64` seed and derives its
//! stream through [`stream`], so independent components never share state and
//! reruns are bit-reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG used throughout. ChaCha8 is fast, portable, and stable across
/// platforms, which the determinism contract depends on.
pub type Rng = ChaCha8Rng;

/// Root RNG for a seed.
pub fn root(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent named stream from (seed, label, index).
///
/// Splitmix-style mixing keeps streams decorrelated without any shared
/// mutable state between components.
pub fn stream(seed: u64, label: &str, index: u64) -> Rng {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15 ^ seed;
    for b in label.as_bytes() {
        h = h.wrapping_mul(0x100_0000_01b3).wrapping_add(*b as u64);
    }
    h ^= index.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 31;
    ChaCha8Rng::seed_from_u64(h)
}
