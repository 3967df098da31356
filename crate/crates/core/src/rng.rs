//! Seed handling.
//!
//! Every random draw in the crate goes through a [`ChaCha8Rng`] built by
//! [`stream`]. A caller seed plus a stream index (path number, sample number,
//! permutation number) selects an independent ChaCha stream, so work split
//! across threads or resumed from a checkpoint draws the same numbers as a
//! serial run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator for stream `index` under `seed`.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Derives a child seed from `(seed, tag)` with the SplitMix64 finalizer.
pub fn derive(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
