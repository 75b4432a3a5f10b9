//! Content hashing and seed derivation.
//!
//! Every artifact that depends on a vocabulary carries the vocabulary's
//! content hash so downstream steps can refuse mismatched inputs. Seeds for
//! per-record RNG streams are derived from the same primitive so results do
//! not depend on batch composition or worker scheduling.

use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 of raw bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Derive a 64-bit seed from a base seed and a label.
///
/// Stable across platforms and releases (unlike `DefaultHasher`), so plans
/// and samples reproduce byte-for-byte anywhere.
pub fn derive_seed(base: u64, label: &[u8]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(label);
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Per-record seed: a stable hash of (global seed, record id).
pub fn record_seed(global_seed: u64, record_id: &str) -> u64 {
    derive_seed(global_seed, record_id.as_bytes())
}
