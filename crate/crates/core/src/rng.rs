//! Seed derivation. Every random stream in the toolkit is a ChaCha8 generator
//! keyed by a top-level seed plus a small tuple of indices, so parallel and
//! serial orderings draw identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a stream path into a fresh 64-bit key.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng_from(seed: u64, path: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Stream tags, kept distinct so that e.g. dataset and training draws never alias.
pub mod stream {
    pub const DATASET: u64 = 1;
    pub const TRAIN_STEP: u64 = 2;
    pub const INIT: u64 = 3;
    pub const GENERATE: u64 = 4;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn derived_streams_differ_and_repeat() {
        let a: u64 = rng_from(7, &[1, 2]).gen();
        let b: u64 = rng_from(7, &[1, 3]).gen();
        let c: u64 = rng_from(7, &[1, 2]).gen();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
