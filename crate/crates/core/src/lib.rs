//! Homomorphism-error laboratory: a synthetic compositional grammar, a small
//! decoder-only transformer trained from scratch, layer-wise composition
//! probes, HE-regularized training and the experiment harness around them.

pub mod evalstats;
pub mod grammar;
pub mod harness;
pub mod hereg;
pub mod model;
pub mod numerics;
pub mod probes;
pub mod trainer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable 64-bit seed from a list of labels.
pub fn derive_seed(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Independent generator for one named purpose under a run seed.
pub fn stream_rng(seed: u64, purpose: &str) -> ChaCha8Rng {
    seeded_rng(derive_seed(&[&seed.to_string(), purpose]))
}
