//! Seeded randomness.
//!
//! Every random draw in the crate flows through [`ZskdRng`], which is
//! ChaCha8 from `rand_chacha`: a portable generator whose stream for a given
//! 64-bit seed is fixed across platforms and releases. Independent streams
//! (per epoch, per impression batch, ...) are obtained with [`derive_seed`]
//! rather than by sharing one generator, so parallel and serial runs draw
//! identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type ZskdRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> ZskdRng {
    ZskdRng::seed_from_u64(seed)
}

/// Mixes a base seed with a list of tags into a new seed (SplitMix64 finalizer
/// applied after each tag).
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix(seed ^ 0x5a4b_5344_0000_0001);
    for &tag in tags {
        state = splitmix(state ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    state
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded Fisher-Yates shuffle of `0..n`.
pub fn permutation(n: usize, rng: &mut ZskdRng) -> Vec<usize> {
    use rand::Rng;
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}
