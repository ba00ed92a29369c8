//! Seeded, splittable random streams.
//!
//! Every stochastic choice in a run is drawn from a ChaCha8 stream derived
//! from the run seed and a stream label, so sub-tasks (trials, epochs,
//! grid points) can be generated in any order with identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Root generator for a seed.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent child stream `label` of `seed`.
pub fn split(seed: u64, label: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label);
    rng
}

/// Derive a child seed; used where a plain `u64` must be handed on.
pub fn child_seed(seed: u64, label: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
