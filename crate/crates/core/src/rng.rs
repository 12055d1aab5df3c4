//! Seeded random streams.
//!
//! Every replication owns one `ChaCha8Rng`. Its seed is a pure function of
//! the master seed and the replication coordinates, so results never depend
//! on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a list of words into one seed: `h ← splitmix64(h ⊕ w)` for each word,
/// starting from `splitmix64(master)`.
pub fn derive_seed(master: u64, words: &[u64]) -> u64 {
    words
        .iter()
        .fold(splitmix64(master), |h, &w| splitmix64(h ^ w))
}

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn replication_stream(master: u64, cell: u64, replication: u64) -> (u64, Stream) {
    let seed = derive_seed(master, &[cell, replication]);
    (seed, stream(seed))
}
