//! Deterministic random-state derivation.
//!
//! Every random draw in the toolkit flows from one master seed through a
//! labeled hash derivation. Work items (one image, one augmentation, one
//! epoch shuffle) each get their own stream, so parallel scheduling order can
//! never change what is drawn, and any item can be regenerated in isolation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG from the master seed and a label.
///
/// Labels are slash-separated paths such as
/// `augment/<source_id>/train/<sample_index>/<epoch>`. Identifier components
/// are restricted to `[a-z0-9_-]` by manifest validation, so distinct paths
/// never collide.
pub fn derive_rng(master_seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update([0xff]); // domain separator between seed and label
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Hash arbitrary bytes down to a stable 64-bit value (used for run ids).
pub fn stable_hash64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}
