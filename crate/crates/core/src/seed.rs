//! Seed fan-out. A master seed is expanded into per-stage seeds by hashing
//! the stage name, so each stage can be reproduced on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(master: u64, stage: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(stage.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Seed for an indexed sub-stream of a stage (one per column, repetition, ...).
pub fn derive_indexed(master: u64, stage: &str, index: u64) -> u64 {
    derive_seed(master, &format!("{stage}#{index}"))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
