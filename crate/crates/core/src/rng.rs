//! Seed splitting.
//!
//! Every random consumer in the crate derives its generator from a master
//! seed plus a stream path, so parallel work (learners, seeds, preset cells)
//! draws from independent and reproducible streams regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags used across modules. Distinct tags keep e.g. the chain draw
/// and the bootstrap draw of the same seed independent.
pub mod tag {
    pub const CHAIN: u64 = 0x01;
    pub const NOISE: u64 = 0x02;
    pub const EVAL: u64 = 0x03;
    pub const BAYES: u64 = 0x04;
    pub const RESAMPLE: u64 = 0x05;
    pub const LANCZOS: u64 = 0x06;
    pub const NYSTROM: u64 = 0x07;
    pub const REPLAY: u64 = 0x08;
    pub const LEARNER: u64 = 0x09;
    pub const CELL: u64 = 0x0a;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministically derive a child seed from `seed` and `index`.
pub fn split(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(index.wrapping_add(0x6a09_e667_f3bc_c909)))
}

/// A generator for stream `stream` under `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
    rng.set_stream(stream);
    rng
}

/// Generator for a (tag, index) pair under `seed`, e.g. learner `j`'s bootstrap.
pub fn substream(seed: u64, tag: u64, index: u64) -> Rng {
    stream(split(seed, index), tag)
}
