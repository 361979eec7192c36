//! Seeded random substreams.
//!
//! Every random decision in the crate draws from a `ChaCha8Rng` keyed by a
//! root seed plus a tag path, so that the same `(seed, tags)` always yields
//! the same stream regardless of call order or thread.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Well-known tags that keep substreams for different purposes disjoint.
pub mod tag {
    pub const INIT: u64 = 0x11;
    pub const TEACHER: u64 = 0x12;
    pub const DATA: u64 = 0x13;
    pub const MASK: u64 = 0x14;
    pub const SHUFFLE: u64 = 0x15;
    pub const CLUSTER: u64 = 0x16;
    pub const EXPORT: u64 = 0x17;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn substream(seed: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(mix(seed, tags))
}
