//! Deterministic derivation of independent RNG streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a sequence of identifiers into one seed.
pub fn derive(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5dcc_0a11_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// RNG for `(seed, round, client)`; independent of the order clients run in.
pub fn client_rng(seed: u64, round: u64, client_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(&[seed, round, client_id, 0xc11e]))
}

pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(parts))
}
