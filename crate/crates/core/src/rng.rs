//! Seeded randomness.
//!
//! Every random draw in the crate goes through [`SeededRng`], which is
//! ChaCha8 keyed by `seed_from_u64` (the seed is expanded with PCG32 as
//! documented by `rand_core`). Streams for independent purposes are derived
//! with [`derive`] so that, for example, adding an epoch does not shift the
//! initialization stream.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A child stream for `purpose`, independent of other purposes under the same seed.
pub fn derive(seed: u64, purpose: &str) -> SeededRng {
    // FNV-1a of the purpose tag, mixed into the seed.
    let tag = purpose
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3));
    seeded(seed ^ tag.rotate_left(17))
}

/// `amount` distinct indices from `0..len`, in draw order.
pub fn sample_indices<R: Rng + ?Sized>(rng: &mut R, len: usize, amount: usize) -> Vec<usize> {
    index::sample(rng, len, amount.min(len)).into_vec()
}

/// Uniform index in `0..len`; `len` must be positive.
pub fn pick<R: Rng + ?Sized>(rng: &mut R, len: usize) -> usize {
    rng.random_range(0..len)
}
