//! SHA-256 helpers shared by the blob store, idempotency keys and state hashing.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 over the canonical JSON encoding of `value`.
///
/// `serde_json` maps are ordered by key, so equal values hash equally
/// regardless of the order in which their fields were inserted.
pub fn canonical_json_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializing an in-memory value cannot fail");
    sha256_hex(&bytes)
}

/// True when `s` is 64 lowercase hex characters.
pub fn is_sha256_hex(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}
