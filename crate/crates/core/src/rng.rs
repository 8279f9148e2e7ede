//! Seeded random streams.
//!
//! All randomness derives from one master seed. Each consumer asks for a
//! named stream, so one component can be replayed without re-running the
//! others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DATA: &str = "data";
pub const INIT: &str = "init";
pub const BATCHING: &str = "batching";
pub const BOOTSTRAP: &str = "bootstrap";
pub const AUGMENT: &str = "augment";

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Stream `name` of the generator seeded with `seed`.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

/// Seed for the `index`-th item of a named stream, e.g. one per sample.
pub fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    let mut h = fnv1a(name.as_bytes()) ^ seed.rotate_left(17);
    h ^= index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    // splitmix64 finaliser
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}
