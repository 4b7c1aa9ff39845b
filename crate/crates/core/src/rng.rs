//! Seeded random streams.
//!
//! Every random choice in the pipeline draws from a named substream derived
//! from the single experiment seed, so runs are reproducible and independent
//! stages do not perturb each other's streams.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// Stable 64-bit FNV-1a hash. Used instead of `std::hash` so derived seeds
/// do not depend on the process or platform.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive a deterministic RNG for a named substream of `seed`.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a64(name.as_bytes())))
}

/// Derive a deterministic RNG for an indexed substream (e.g. per column,
/// per repeat), so parallel consumers stay reproducible.
pub fn indexed_substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let base = splitmix64(seed ^ fnv1a64(name.as_bytes()));
    ChaCha8Rng::seed_from_u64(splitmix64(base ^ splitmix64(index)))
}
