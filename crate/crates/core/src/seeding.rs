//! Deterministic RNG derivation: one master seed, split per subsystem by label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent generator from `(seed, label)`.
///
/// The split is stable across platforms and runs, so parallel and serial
/// pipelines that hand out one label per work item produce identical output.
pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
