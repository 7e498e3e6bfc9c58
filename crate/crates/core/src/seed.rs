//! Deterministic seeding.
//!
//! Noise streams come from ChaCha20 seeded through `seed_from_u64`, which is
//! specified by `rand_core` and gives identical output on every platform.
//! Sub-seeds for trials and channels are derived with the SplitMix64 finaliser
//! so that a trial's stream depends only on the master seed and its index.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sub-stream `index` under `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(0xA076_1D64_78BD_642F)))
}

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}
