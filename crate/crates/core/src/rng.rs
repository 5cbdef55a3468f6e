//! Seeded randomness: one root seed, named substreams.
//!
//! Every random artifact in the pipeline (latents, model maps, datasets,
//! adapter init, per-epoch batch orders) draws from its own ChaCha8 stream
//! whose 256-bit seed is `SHA-256(root_seed_le || label)`. Streams are
//! therefore independent, portable across platforms, and any stage can be
//! regenerated in isolation from the root seed and its label.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic generator for the substream named `label` under `root`.
pub fn substream(root: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Derives a child root seed (for stages that take a `u64` seed of their own)
/// from a parent seed and a label. First eight digest bytes, little-endian.
pub fn child_seed(root: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}
