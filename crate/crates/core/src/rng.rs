//! Seeded, independent random streams.
//!
//! Each consumer gets its own ChaCha stream so that changing how much
//! randomness one part of a run consumes never shifts another part.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Geometry = 1,
    DataSampling = 2,
    ModelInit = 3,
    BatchSampling = 4,
    Augmentation = 5,
    Memory = 6,
}

pub fn stream(seed: u64, which: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
