//! Seed derivation.
//!
//! Every random stream is keyed by `(root seed, tag)`:
//!
//! ```text
//! stream seed = splitmix64(root ^ fnv1a64(tag))
//! ```
//!
//! and drives a ChaCha8 generator. Tags name the consumer, e.g. `"init"`,
//! `"actions"`, `"episodes/3"` or `"scene/train/0"`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, tag: &str) -> u64 {
    splitmix64(root ^ fnv1a64(tag.as_bytes()))
}

pub fn rng_for(root: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tag))
}
