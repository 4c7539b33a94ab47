//! Seed derivation. Every random stream in the crate is an explicitly seeded
//! ChaCha generator; sub-streams are derived by mixing a parent seed with
//! stream coordinates so parallel work never shares generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: &[u64]) -> u64 {
    stream.iter().fold(mix64(seed), |acc, &s| {
        mix64(acc ^ mix64(s.wrapping_add(0x5851_F42D)))
    })
}

pub fn rng_for(seed: u64, stream: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, stream))
}
