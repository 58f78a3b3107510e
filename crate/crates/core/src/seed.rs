//! Seed derivation for independent, reproducible random streams.
//!
//! A child seed is `root ^ hash(coordinates)` where the hash folds each
//! coordinate through the SplitMix64 finalizer. The mapping is fixed and
//! platform independent, so a sweep cell always sees the same stream no matter
//! which worker thread runs it or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit hash of a coordinate tuple.
pub fn hash_coords(coords: &[u64]) -> u64 {
    let mut h = mix(coords.len() as u64 ^ GOLDEN);
    for &c in coords {
        h = mix(h.wrapping_add(GOLDEN) ^ mix(c));
    }
    h
}

/// Child seed for a cell of a sweep.
pub fn derive_seed(root: u64, coords: &[u64]) -> u64 {
    root ^ hash_coords(coords)
}

/// The generator used throughout the crate.
pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags used when deriving per-purpose seeds.
pub mod tag {
    pub const INSTANCE: u64 = 1;
    pub const LABELS: u64 = 2;
    pub const BETA: u64 = 3;
}
