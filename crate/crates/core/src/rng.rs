//! Seeded random streams.
//!
//! Every run derives its generators from one master seed. Each purpose gets
//! its own ChaCha8 stream (same key, distinct stream id), so adding draws to
//! one purpose never shifts another. ChaCha8 and its `seed_from_u64`
//! expansion are fully specified and give identical sequences on every
//! platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Init = 1,
    Data = 2,
    Shuffle = 3,
    Noise = 4,
    Probe = 5,
}

pub fn stream(master_seed: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(purpose as u64);
    rng
}
