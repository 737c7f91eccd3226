//! Seeded random streams.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha`) seeded via
//! `seed_from_u64(seed)` with a fixed stream id per consumer, so independent
//! consumers never share a sequence and results are reproducible across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids; one per consumer of randomness.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SOURCE_GEOMETRY: u64 = 2;
    pub const TARGET_GEOMETRY: u64 = 3;
    pub const SOURCE_PIXELS: u64 = 4;
    pub const TARGET_PIXELS: u64 = 5;
    pub const BATCHES: u64 = 6;
    pub const SPLIT: u64 = 7;
    pub const PROTOTYPES: u64 = 8;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
