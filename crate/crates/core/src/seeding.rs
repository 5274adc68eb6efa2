//! Counter-based derivation of independent RNG streams.
//!
//! Every random decision in the crate draws from a `ChaCha8Rng` whose seed
//! is a splitmix64 fold of a master seed and a list of stream labels
//! (purpose tag, step index, episode index, ...). Streams are therefore
//! reproducible and order-independent: sampling step 7 never depends on
//! whether step 6 was sampled first.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `parts` into a single well-mixed 64-bit seed.
pub fn fold_seed(parts: &[u64]) -> u64 {
    let mut acc = 0x51ed_270b_684e_21bd_u64;
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

/// A fresh generator for the stream labelled by `parts`.
pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(fold_seed(parts))
}
