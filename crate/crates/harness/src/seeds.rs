//! Named random streams derived from one master seed.
//!
//! `stream_seed(master, name) = splitmix64(master ^ fnv1a64(name))`. Each
//! consumer owns one stream, so adding draws to one never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DATA: &str = "data";
pub const INIT: &str = "init";
pub const MASK: &str = "mask";
pub const TRAIN_NOISE: &str = "train-noise";
pub const SAMPLER: &str = "sampler";
pub const PROJECTIONS: &str = "projections";
pub const REFERENCE: &str = "reference";
pub const PROBE: &str = "probe";

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream_seed(master: u64, name: &str) -> u64 {
    splitmix64(master ^ fnv1a64(name.as_bytes()))
}

pub fn stream(master: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, name))
}
