//! Seed derivation and deterministic RNG construction.
//!
//! All randomness in the crate flows from explicit `u64` seeds. Sub-seeds
//! (per record, per class, per round/client, per epoch) are derived with the
//! splitmix64 mixer so that regeneration is bit-identical and independent
//! streams never share state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The splitmix64 finalizer: a bijective mixer on `u64`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a sub-seed from a master seed and a tag path.
///
/// Each tag is mixed before being folded in so that small consecutive
/// integers (record indices, round numbers) land far apart.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(master);
    for &t in tags {
        s = splitmix64(s ^ splitmix64(t));
    }
    s
}

/// Deterministic generator for a derived seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
