//! Seed derivation.
//!
//! Every random stream in a run descends from one root seed. A child seed is
//! `mix(parent ^ fnv1a(label))`, and indexed children (iteration, group,
//! member, ...) are `mix(parent ^ mix(index + 1))`, where `mix` is the
//! SplitMix64 finalizer. Streams are `ChaCha8Rng`, which is platform independent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Child seed for a named purpose.
pub fn derive(parent: u64, label: &str) -> u64 {
    mix(parent ^ fnv1a(label))
}

/// Child seed for an index within a purpose.
pub fn derive_index(parent: u64, index: u64) -> u64 {
    mix(parent ^ mix(index.wrapping_add(1)))
}

/// Convenience: a stream seeded from `derive(parent, label)`.
pub fn rng_for(parent: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive(parent, label))
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
