//! Per-participant variant seeds.
//!
//! A seed is the first 8 bytes (big-endian) of
//! `SHA-256("examkit-variant-seed-v1" ‖ len(salt) ‖ salt ‖ len(pid) ‖ pid ‖ len(eid) ‖ eid)`
//! where every `len` is a 4-byte big-endian byte count. The randomization salt
//! acts as the key. The construction only uses byte strings, so seeds
//! reproduce on every platform and in any reimplementation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const DOMAIN: &[u8] = b"examkit-variant-seed-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VariantSeed(pub u64);

impl VariantSeed {
    pub fn value(self) -> u64 {
        self.0
    }
}

pub fn derive_seed(salt: &str, participant_id: &str, exercise_id: &str) -> VariantSeed {
    let mut hasher = Sha256::new();
    hasher.update(DOMAIN);
    for field in [salt, participant_id, exercise_id] {
        hasher.update((field.len() as u32).to_be_bytes());
        hasher.update(field.as_bytes());
    }
    let digest = hasher.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    VariantSeed(u64::from_be_bytes(first))
}
