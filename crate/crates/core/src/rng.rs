//! Seeded random streams.
//!
//! Every stochastic component takes an explicit generator. Independent
//! streams (per batch, per shard, per sweep row) are derived from a parent
//! seed and a label so that results do not depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type SpanRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SpanRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives a child seed from a parent seed and a label.
pub fn derive_seed(parent: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(out)
}

pub fn derived(parent: u64, label: &str, index: u64) -> SpanRng {
    seeded(derive_seed(parent, label, index))
}
