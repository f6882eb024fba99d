//! Splittable seed derivation.
//!
//! Every random decision in the crate draws from a ChaCha stream whose seed
//! is derived from `(root seed, domain label, index)`. Episodes, batches,
//! and probe iterations can therefore be produced independently — in any
//! order, on any number of threads — and still be byte-identical to a
//! sequential run.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; good avalanche, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the domain label keeps unrelated streams apart.
fn domain_hash(domain: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in domain.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives an independent child seed for `(domain, index)` under `root`.
pub fn derive_seed(root: u64, domain: &str, index: u64) -> u64 {
    mix(root ^ mix(domain_hash(domain)) ^ mix(index.wrapping_mul(0xa076_1d64_78bd_642f)))
}

/// A ChaCha generator for the derived stream.
pub fn stream(root: u64, domain: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, domain, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: f64 = stream(7, "episode", 0).gen();
        let b: f64 = stream(7, "episode", 0).gen();
        let c: f64 = stream(7, "episode", 1).gen();
        let d: f64 = stream(7, "batch", 0).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
