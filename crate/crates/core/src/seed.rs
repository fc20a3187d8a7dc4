//! Deterministic seed substreams. Every source of randomness in an experiment
//! (quantizer noise, attack transform draws, defense arm draws, ...) derives
//! its own stream from one root seed, a domain label, and an index, so runs
//! are reproducible and reordering work does not change results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer: a cheap bijective mixer with good avalanche.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derives the seed for substream (`domain`, `index`) of `root`.
pub fn substream(root: u64, domain: &str, index: u64) -> u64 {
    mix(mix(root ^ 0x9e3779b97f4a7c15) ^ fnv1a(domain) ^ mix(index.wrapping_add(0x632be59bd9b4e019)))
}

/// A ChaCha8 generator over that substream.
pub fn rng(root: u64, domain: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream(root, domain, index))
}
