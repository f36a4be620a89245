//! Seed derivation and random streams.
//!
//! Every random stream in a run is a ChaCha8 generator whose seed is derived
//! from the run seed and a tuple of domain labels, so streams never depend on
//! the order in which other streams were consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one 64-bit seed.
pub fn derive(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(GOLDEN, |acc, &p| mix64(acc.wrapping_add(GOLDEN) ^ p))
}

pub fn stream(parts: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive(parts))
}

/// Domain labels keep derived streams disjoint.
pub mod domain {
    pub const TASK_CENTERS: u64 = 1;
    pub const NODE: u64 = 2;
    pub const PARTICIPATION: u64 = 3;
    pub const PSEUDONYM: u64 = 4;
    pub const PAIR_SEED: u64 = 5;
    pub const ADVERSARY: u64 = 6;
    pub const COLLUDER: u64 = 7;
    pub const DP_NOISE: u64 = 8;
    pub const PLANTED: u64 = 9;
    pub const TASK: u64 = 10;
}
