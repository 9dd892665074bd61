//! Seeding conventions.
//!
//! Every random draw in the crate comes from a ChaCha20 stream
//! (`rand_chacha::ChaCha20Rng`) seeded through `seed_from_u64`. Independent
//! streams are obtained with [`derive_seed`], which hashes a parent seed
//! together with a stream label and an index using SplitMix64 finalisers.
//! The derivation depends only on its arguments, so results do not depend on
//! the order in which parallel tasks run.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type SeededRng = ChaCha20Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha20Rng::seed_from_u64(seed)
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes.
fn label_hash(label: &str) -> u64 {
    label.bytes().fold(0xCBF2_9CE4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Child seed for the stream `(label, index)` under `seed`.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ label_hash(label)) ^ splitmix64(index.wrapping_add(0x5851_F42D)))
}

/// Convenience: a generator for a derived stream.
pub fn stream(seed: u64, label: &str, index: u64) -> SeededRng {
    rng_from_seed(derive_seed(seed, label, index))
}
