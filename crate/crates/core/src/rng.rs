//! Seeded random streams.
//!
//! Every consumer of randomness in a run draws from its own ChaCha stream keyed
//! by `(seed, stream id)`, so methods that share a seed see identical
//! environment noise and initial networks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const STREAM_ENV: u64 = 1;
pub const STREAM_POLICY: u64 = 2;
pub const STREAM_INIT: u64 = 3;
pub const STREAM_REPLAY: u64 = 4;
pub const STREAM_MODEL: u64 = 5;
pub const STREAM_SAMPLE: u64 = 6;

pub fn stream(seed: u64, id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
