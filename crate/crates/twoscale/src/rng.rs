//! Hierarchical seed derivation. A child stream is named by (base seed,
//! module tag, index) and hashed, so ensembles can be generated in any order
//! or in parallel without changing the numbers.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn digest(seed: u64, tag: &str, index: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((tag.len() as u64).to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(index.to_le_bytes());
    hasher.finalize().into()
}

/// 64-bit child seed.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let bytes = digest(seed, tag, index);
    u64::from_le_bytes(bytes[..8].try_into().expect("digest has 32 bytes"))
}

/// Generator for the stream named by (seed, tag, index).
pub fn stream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(digest(seed, tag, index))
}
