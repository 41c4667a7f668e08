//! Seed discipline.
//!
//! Every stochastic operation takes an explicit seed and derives a ChaCha8
//! stream from it, so runs are bit-reproducible regardless of thread count
//! or call order. Distinct purposes within one run get distinct streams via
//! `derive`, which mixes a label into the seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives a sub-seed for a named purpose (splitmix-style mixing).
pub fn derive(seed: u64, label: &str) -> u64 {
    let mut h: u64 = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
        h ^= h >> 33;
    }
    h
}
