//! Seed derivation. Every random stream in the crate is addressed by a tuple
//! of integers hashed into a 64-bit seed, so work can be replayed or split
//! across workers without shared generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a sequence of integers into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed_0f_7a_b0u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream for one sample in one epoch of a run.
pub fn sample_rng(global_seed: u64, epoch: u64, sample_index: u64) -> Rng {
    rng_from(derive_seed(&[global_seed, epoch, sample_index]))
}
