//! Seeded RNG streams.
//!
//! Every random decision in the crate draws from a [`ChaCha8Rng`] derived
//! from a user seed plus a stream label, so independent consumers (data
//! order, prompts, dropout, sampling) never share state.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng as Rng;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream labels used across the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Init = 1,
    DataOrder = 2,
    Prompt = 3,
    Dropout = 4,
    CondDropout = 5,
    Sample = 6,
    KMeans = 7,
    Dataset = 8,
}

pub fn stream(seed: u64, s: Stream) -> Rng {
    Rng::seed_from_u64(mix(seed ^ mix(s as u64)))
}

/// Sub-stream for a numbered item (step, example, image).
pub fn substream(seed: u64, s: Stream, a: u64, b: u64) -> Rng {
    let base = mix(seed ^ mix(s as u64));
    Rng::seed_from_u64(mix(base ^ mix(mix(a) ^ b)))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
