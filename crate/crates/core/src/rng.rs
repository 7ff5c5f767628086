//! Seeded random number generation.
//!
//! Every stochastic routine in the crate draws from [`Rng`], a ChaCha8
//! stream cipher generator. ChaCha is counter based: a 64-bit seed selects the
//! key and a 64-bit stream id selects an independent sequence, so different
//! consumers of the same seed (source sampling, target sampling, training)
//! never share draws.

use rand::SeedableRng;

pub type Rng = rand_chacha::ChaCha8Rng;

/// Stream ids used across the crate.
pub mod stream {
    pub const SOURCE: u64 = 1;
    pub const TARGET: u64 = 2;
    pub const INIT: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const HELD_OUT: u64 = 5;
    pub const GRAD_CHECK: u64 = 6;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
