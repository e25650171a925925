//! Seeded RNG helpers.
//!
//! Every stochastic routine in the crate takes an explicit seed and builds a
//! ChaCha8 stream from it, so identical seeds give identical results across
//! runs and platforms. `derive_seed` splits one base seed into independent
//! streams for sub-tasks without overlap.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream from `(base, label, index)`.
///
/// SplitMix64-style finalizer over the mixed words; cheap and stable.
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for &b in label.as_bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    splitmix(h ^ index)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn derive_seed_is_stable_and_disjoint() {
        let a = derive_seed(42, "corpus.script", 0);
        let b = derive_seed(42, "corpus.script", 1);
        let c = derive_seed(42, "corpus.fix", 0);
        assert_eq!(a, derive_seed(42, "corpus.script", 0));
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn streams_reproduce() {
        let mut r1 = rng_from_seed(7);
        let mut r2 = rng_from_seed(7);
        for _ in 0..32 {
            assert_eq!(r1.random::<u64>(), r2.random::<u64>());
        }
    }
}
