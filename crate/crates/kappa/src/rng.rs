//! Keyed random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the run seed
//! and a list of keys (stream tag, step, case id, rollout index), so outcomes do
//! not depend on scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Clone)]
pub struct StreamKey {
    hasher: Sha256,
}

impl StreamKey {
    pub fn new(seed: u64, tag: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        StreamKey { hasher }.str(tag)
    }

    pub fn u64(mut self, v: u64) -> Self {
        self.hasher.update([0u8]);
        self.hasher.update(v.to_le_bytes());
        self
    }

    pub fn str(mut self, s: &str) -> Self {
        self.hasher.update([1u8]);
        self.hasher.update((s.len() as u64).to_le_bytes());
        self.hasher.update(s.as_bytes());
        self
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.hasher.finalize().into())
    }
}

pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    StreamKey::new(seed, tag).rng()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
