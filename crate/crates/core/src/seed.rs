//! Named random streams.
//!
//! Every stochastic draw in a run comes from a stream derived by hashing the
//! run seed together with a purpose tag and the identifiers of the thing being
//! drawn for (image id, episode, ...). Streams are therefore independent of
//! iteration order and thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Builder for a named stream.
#[derive(Clone)]
pub struct StreamKey {
    hasher: Sha256,
}

impl StreamKey {
    pub fn new(seed: u64, tag: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        let key = Self { hasher };
        key.with_str(tag)
    }

    pub fn with_str(mut self, part: &str) -> Self {
        // length prefix keeps ("ab","c") and ("a","bc") apart
        self.hasher.update((part.len() as u64).to_le_bytes());
        self.hasher.update(part.as_bytes());
        self
    }

    pub fn with_u64(mut self, part: u64) -> Self {
        self.hasher.update(8u64.to_le_bytes());
        self.hasher.update(part.to_le_bytes());
        self
    }

    pub fn rng(self) -> ChaCha8Rng {
        let digest: [u8; 32] = self.hasher.finalize().into();
        ChaCha8Rng::from_seed(digest)
    }
}

/// Shorthand for the common `(seed, tag, id, index)` stream.
pub fn stream(seed: u64, tag: &str, id: &str, index: u64) -> ChaCha8Rng {
    StreamKey::new(seed, tag).with_str(id).with_u64(index).rng()
}
