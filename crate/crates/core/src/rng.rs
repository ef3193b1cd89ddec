//! Seeded random generation.
//!
//! All randomness (initialization, dropout masks, shuffling, splitting)
//! comes from ChaCha8 seeded with a `u64` through
//! [`rand::SeedableRng::seed_from_u64`]. The `rand_chacha` crate guarantees
//! value-stable output for a given seed, so runs reproduce across builds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Seed used when none is given on the command line.
pub const DEFAULT_SEED: u64 = 42;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a named purpose from a base seed.
pub fn derive(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
