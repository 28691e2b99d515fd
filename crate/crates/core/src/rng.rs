//! Seed fan-out. One master seed derives independent, labelled sub-streams so
//! that ablation variants consume randomness identically regardless of which
//! loss flags are enabled.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// FNV-1a over the tag, mixed with the master seed through a splitmix64
/// finalizer. Stable across platforms and builds.
pub fn subseed(master: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic RNG for the given (master seed, label) pair.
pub fn stream(master: u64, tag: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(subseed(master, tag))
}
