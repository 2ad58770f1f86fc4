//! Seeded random streams. Every consumer draws from its own ChaCha stream
//! derived from the single run seed, so adding draws in one place never
//! shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_PARAMS: u64 = 1;
pub const STREAM_EMBEDDINGS: u64 = 2;
pub const STREAM_SHUFFLE: u64 = 3;
pub const STREAM_SYNTH: u64 = 4;
pub const STREAM_PROBE: u64 = 5;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
