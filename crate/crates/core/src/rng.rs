//! Keyed random streams.
//!
//! Every stochastic component derives its generator from a root seed and a
//! stable key, so results do not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the key bytes, folded into the seed with splitmix64.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in key.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(seed ^ splitmix64(h))
}

/// Derive a child seed from a seed and a sequence of integer coordinates.
pub fn derive_seed_ints(seed: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix64(seed), |acc, c| splitmix64(acc ^ splitmix64(*c)))
}

pub fn stream(seed: u64, key: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, key))
}

pub fn stream_ints(seed: u64, coords: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed_ints(seed, coords))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn keyed_streams_are_reproducible_and_distinct() {
        let mut r = stream(7, "ep-1");
        let b: Vec<u64> = (0..4).map(|_| r.random()).collect();
        let mut r2 = stream(7, "ep-1");
        let c: Vec<u64> = (0..4).map(|_| r2.random()).collect();
        assert_eq!(b, c);
        assert_ne!(derive_seed(7, "ep-1"), derive_seed(7, "ep-2"));
        assert_ne!(derive_seed_ints(7, &[1, 2]), derive_seed_ints(7, &[2, 1]));
    }
}
