//! Deterministic seed derivation so every pipeline stage draws from its own
//! stream. Mixing is splitmix64; the same (base, salt) always yields the
//! same generator on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream salts, one per consumer of randomness.
pub mod salt {
    pub const SCENE: u64 = 0x5ce7e;
    pub const SPLIT: u64 = 0x511f7;
    pub const HALF: u64 = 0xa1f;
    pub const INIT_PRIMARY: u64 = 0x1217;
    pub const INIT_ANCILLARY: u64 = 0xa7c1;
    pub const INIT_SELFCORR: u64 = 0x5e1f;
    pub const BATCH: u64 = 0xba7c4;
    pub const NOISE: u64 = 0x7015e;
    pub const TRAIN_DATA: u64 = 0xd47a;
    pub const EVAL_DATA: u64 = 0xe7a1;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mix a base seed with a stream salt (and an optional index).
pub fn derive(base: u64, salt: u64) -> u64 {
    splitmix64(base ^ splitmix64(salt))
}

pub fn derive2(base: u64, salt: u64, index: u64) -> u64 {
    splitmix64(derive(base, salt) ^ splitmix64(index.wrapping_add(0x9e37)))
}

/// Seeded generator for a (base, salt) stream.
pub fn rng(base: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, salt))
}

pub fn rng2(base: u64, salt: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive2(base, salt, index))
}
