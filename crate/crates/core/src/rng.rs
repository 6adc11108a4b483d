//! Named, independently seeded random streams.
//!
//! Every consumer of randomness (dataset, init, time maps, noise, sampling)
//! draws from its own stream derived from `(seed, label, index)`, so adding
//! draws in one place never shifts the values seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha8Rng;

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Deterministic generator for stream `label`, item `index`.
pub fn stream(seed: u64, label: &str, index: u64) -> StreamRng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(label).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..].copy_from_slice(b"tdpaint!");
    ChaCha8Rng::from_seed(key)
}

pub fn normal_vec(rng: &mut StreamRng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
