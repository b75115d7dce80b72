//! Seed derivation. Every stochastic component draws from a ChaCha stream
//! keyed purely by integers (seed, step, slot, ...), never from shared state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_0F_7A1A_u64, |acc, &p| mix64(acc ^ mix64(p)))
}

pub fn rng_for(parts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(parts))
}

/// Stable 64-bit FNV-1a hash for strings used as seed material.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn derived_streams_are_reproducible_and_distinct() {
        let a: u64 = rng_for(&[7, 42]).random();
        let b: u64 = rng_for(&[7, 42]).random();
        let c: u64 = rng_for(&[7, 43]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(derive(&[1, 2]), derive(&[2, 1]));
    }
}
