//! Deterministic random streams.
//!
//! Every piece of randomness in the pipeline derives from one master seed,
//! fanned out by a named stream plus optional indices (step, epoch, attempt).
//! Derivation is stateless, so checkpoints only need to remember the master
//! seed and the counters — resuming reproduces the original run bit for bit.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

/// Sub-seed for `(master, name)`.
pub fn stream_seed(master: u64, name: &str) -> u64 {
    indexed_seed(master, name, &[])
}

/// Sub-seed for `(master, name, indices)`.
pub fn indexed_seed(master: u64, name: &str, indices: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update([0x1f]);
    h.update(name.as_bytes());
    for ix in indices {
        h.update([0x1f]);
        h.update(ix.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn stream_rng(master: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, name))
}

pub fn indexed_rng(master: u64, name: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(indexed_seed(master, name, indices))
}
