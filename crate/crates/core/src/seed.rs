//! Seed derivation for independent, reproducible random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a master seed and a path of integer components into a child seed.
pub fn derive(master: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p)))
}

/// Stable 64-bit tag for a string label, usable as a `derive` component.
pub fn tag(label: &str) -> u64 {
    // FNV-1a
    label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_rng(master: u64, parts: &[u64]) -> Rng {
    rng(derive(master, parts))
}
