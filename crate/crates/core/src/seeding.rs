//! Deterministic sub-seed derivation so every component draws from its own stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finaliser applied to `base ⊕ tag`.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng(base: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag))
}

pub mod tags {
    pub const CATALOG: u64 = 0x11;
    pub const EPISODE: u64 = 0x100;
    pub const MODEL: u64 = 0x21;
    pub const DECODER: u64 = 0x26;
    pub const STREAM: u64 = 0x27;
    pub const TREE: u64 = 0x22;
    pub const LEAF: u64 = 0x23;
    pub const HEAD: u64 = 0x24;
    pub const BATCHES: u64 = 0x25;
    pub const INDEPENDENT: u64 = 0x400;
    pub const JOINT: u64 = 0x500;
}
