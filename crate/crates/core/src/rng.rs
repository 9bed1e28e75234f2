//! Seeded random number generation.
//!
//! Every stochastic operation in the crate takes an explicit `u64` seed and
//! builds a [`QapRng`] from it. The generator is ChaCha with 8 rounds
//! (`rand_chacha::ChaCha8Rng`), whose output stream is specified by the
//! algorithm and therefore identical on every platform. Independent
//! sub-streams (per fold, per trial, per epoch) are obtained with
//! [`derive_seed`], a SplitMix64 mix of the parent seed and a stream label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type QapRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> QapRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer applied to `seed ^ stream * golden`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
