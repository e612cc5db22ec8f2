//! Deterministic seed derivation for independent random streams.
//!
//! Every stochastic component (scene generation, rollouts, Monte-Carlo
//! trials) draws from its own ChaCha stream keyed by a tuple of integers, so
//! results never depend on scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep derived seeds for different purposes disjoint.
pub mod tag {
    pub const SCENE: u64 = 0x5343_454e;
    pub const TASK: u64 = 0x5441_534b;
    pub const ROLLOUT: u64 = 0x524f_4c4c;
    pub const EVAL: u64 = 0x4556_414c;
    pub const EMBED: u64 = 0x454d_4244;
    pub const WORD: u64 = 0x574f_5244;
    pub const THEORY: u64 = 0x5448_4559;
    pub const INIT: u64 = 0x494e_4954;
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Folds a sequence of integers into one 64-bit seed.
pub fn derive(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6a09_e667_f3bc_c908, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(parts))
}

/// FNV-1a over bytes; stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
