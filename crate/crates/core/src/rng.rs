//! Deterministic randomness.
//!
//! Two flavours are used across the crate:
//!
//! - [`counter_u64`] / [`counter_uniform`]: a stateless hash of a key tuple,
//!   so that a draw for `(seed, iteration, stage)` never depends on the order
//!   in which other draws were made.
//! - [`stream`]: a ChaCha8 generator for bulk draws (weight init, datasets),
//!   seeded from a hashed key so independent streams never overlap by accident.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a seed and a sequence of counters into one 64-bit value.
pub fn counter_u64(seed: u64, counters: &[u64]) -> u64 {
    let mut h = mix64(seed.wrapping_add(GOLDEN));
    for &c in counters {
        h = mix64(h ^ mix64(c.wrapping_add(GOLDEN)));
    }
    h
}

/// Uniform draw in `[0, 1)` with 53 bits of precision.
pub fn counter_uniform(seed: u64, counters: &[u64]) -> f64 {
    (counter_u64(seed, counters) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Independent ChaCha8 stream identified by `(seed, domain, index)`.
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(counter_u64(seed, &[domain as u64, index]))
}

/// Separates the random streams drawn from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    StudentInit = 1,
    TeacherInit = 2,
    TrainData = 3,
    ValidationData = 4,
    Reinit = 5,
    Probe = 6,
    LabelNoise = 7,
}
