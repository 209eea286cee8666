//! Named random streams derived from a root seed.
//!
//! Every consumer (data generation, each expert's sampler, noise draws,
//! initialization) takes its own stream keyed by a tag and indices, so
//! toggling one consumer never shifts the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha20Rng;

pub fn stream(root: u64, tag: &str, indices: &[u64]) -> StreamRng {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    for i in indices {
        h.update(i.to_le_bytes());
    }
    ChaCha20Rng::from_seed(h.finalize().into())
}
