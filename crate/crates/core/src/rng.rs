//! Seeded random streams.
//!
//! Every random decision draws from a ChaCha8 stream keyed by the run seed,
//! a purpose tag and up to two indices (typically epoch and sample id), so
//! results never depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Augment = 3,
    EvalAugment = 4,
    Data = 5,
    Split = 6,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream for `(seed, purpose, a, b)`.
pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for word in [purpose as u64, a, b] {
        h = splitmix(h ^ word);
    }
    ChaCha8Rng::seed_from_u64(h)
}
