//! Deterministic seed derivation.
//!
//! Every stochastic routine takes one master seed and derives an
//! independent stream per subtask (restart, bootstrap replicate, ...).
//! Derivation is a splitmix64 step, so streams are stable across
//! platforms and never depend on execution order.

use rand_chacha::ChaCha8Rng;

/// Derive a child seed from `master` for subtask `index`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A seeded RNG for subtask `index` of `master`.
pub fn stream(master: u64, index: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(derive_seed(master, index))
}
