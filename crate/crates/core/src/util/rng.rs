//! Deterministic RNG streams.
//!
//! Every random draw in the project comes from a ChaCha8 stream keyed by
//! a global seed plus a string tag (e.g. `"frame/000042"` or a parameter
//! name). Streams are independent of each other and of iteration order,
//! so adding a consumer never perturbs existing ones.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, good enough to decorrelate tag strings into stream keys.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// An independent random stream for (`seed`, `tag`).
pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(tag.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&fnv1a(&seed.to_le_bytes()).to_le_bytes());
    key[24..32].copy_from_slice(&(tag.len() as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
