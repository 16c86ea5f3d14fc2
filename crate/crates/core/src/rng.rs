//! Seed derivation.
//!
//! Every random decision in the pipeline (crop positions, buffer sampling,
//! injected noise, weight init) draws from its own ChaCha stream keyed by
//! `(run seed, purpose, counter)`. Streams never share state, so a run can be
//! resumed at any iteration by re-deriving the same keys.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Crop = 2,
    Sample = 3,
    Noise = 4,
    Shuffle = 5,
    Features = 6,
    Scan = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a stream tag and counter into a new 64-bit seed.
pub fn derive_seed(seed: u64, stream: Stream, counter: u64) -> u64 {
    let a = splitmix64(seed ^ (stream as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93));
    splitmix64(a ^ splitmix64(counter.wrapping_add(0xA076_1D64_78BD_642F)))
}

pub fn stream_rng(seed: u64, stream: Stream, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, counter))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
