//! Named random streams derived from a single experiment seed.
//!
//! A stream seed is `seed ^ fnv1a64(name)`, so adding a new stream never
//! perturbs the draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

pub fn stream_seed(seed: u64, name: &str) -> u64 {
    seed ^ fnv1a64(name.as_bytes())
}

pub fn stream(seed: u64, name: &str) -> StreamRng {
    StreamRng::seed_from_u64(stream_seed(seed, name))
}

/// Stream for the `index`-th repetition of a named stage (e.g. one per epoch).
pub fn indexed_stream(seed: u64, name: &str, index: u64) -> StreamRng {
    let s = stream_seed(seed, name) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    StreamRng::seed_from_u64(s)
}
