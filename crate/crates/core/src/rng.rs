//! Named, seeded random substreams. Every random draw in the crate comes
//! from one of these; there is no global RNG state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_DIRECTIONS: u64 = 1;
pub const STREAM_ATTRIBUTE: u64 = 2;
pub const STREAM_TRAIN: u64 = 3;
pub const STREAM_RANDOM_HEADS: u64 = 4;
pub const STREAM_ADAPT_SAMPLE: u64 = 5;

pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// 64-bit FNV-1a, used to fold string keys into seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
