//! Seeded random streams.
//!
//! Every stochastic step draws from a [`ChaCha8Rng`] derived from a global
//! seed plus the coordinates of the work item, so results do not depend on the
//! order in which items are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed from a base seed and a path of indices.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Stream for one (purpose, item, epoch) triple.
pub fn stream(seed: u64, purpose: u64, item: u64, epoch: u64) -> Rng {
    seeded(derive_seed(seed, &[purpose, item, epoch]))
}

/// Stream purposes, kept distinct so that e.g. view generation and shuffling
/// never share a stream.
pub mod purpose {
    pub const SYNTH: u64 = 1;
    pub const VIEWS: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const REFINE: u64 = 6;
    pub const SPLIT: u64 = 7;
}
