//! Deterministic, platform-independent RNG streams.
//!
//! Every random decision in the pipeline draws from a ChaCha stream derived
//! from (run seed, purpose tag), so runs are reproducible end to end and
//! independent streams never alias.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the tag; stable across platforms and releases.
fn tag_hash(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// RNG for one purpose within one seeded run.
pub fn rng_for(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ tag_hash(tag))
}
