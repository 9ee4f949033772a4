//! Seeded random streams.
//!
//! Every consumer gets its own ChaCha stream derived from `(seed, stream)`, so
//! independent parts of an experiment never share generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const STREAM_DATA: u64 = 0;
pub const STREAM_HOLDOUT: u64 = 1;
pub const STREAM_TRAIN: u64 = 2;
pub const STREAM_SAMPLE: u64 = 3;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
