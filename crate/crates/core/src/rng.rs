//! Seeded randomness. Every stochastic component takes a `LabRng`, and
//! child streams are derived from a root seed by name so that adding a
//! consumer never shifts another consumer's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type LabRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Child seed for the named sub-stream of `root`.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update((name.len() as u64).to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Child seed for the `index`-th draw of a named sub-stream.
pub fn derive_indexed_seed(root: u64, name: &str, index: u64) -> u64 {
    derive_seed(derive_seed(root, name), &index.to_string())
}

pub fn child_rng(root: u64, name: &str) -> LabRng {
    rng_from_seed(derive_seed(root, name))
}
