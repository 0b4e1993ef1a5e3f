//! Seeded random streams.
//!
//! Every consumer of randomness receives its own ChaCha stream derived from a
//! base seed and a tag, so adding a component never perturbs the draws of
//! another one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

/// Mixes two identifiers into one stream tag.
pub fn tag(a: u64, b: u64) -> u64 {
    a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.rotate_left(17)
}

/// `n` draws from `U(-1, 1)`.
pub fn uniform_vec<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}
