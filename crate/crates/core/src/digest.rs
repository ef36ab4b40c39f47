//! SHA-256 content digests used across file formats.

use sha2::{Digest, Sha256};

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn hex(bytes: &[u8]) -> String {
    hex::encode(sha256(bytes))
}

/// First 16 hex characters of the SHA-256 digest.
pub fn short(bytes: &[u8]) -> String {
    let mut h = hex(bytes);
    h.truncate(16);
    h
}

/// Digest of a slice of reals via their little-endian byte images.
pub fn of_reals(values: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}
