//! Short content hashes used to tag configs, instances and reports.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn of_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..8])
}

/// Fingerprint of the compact JSON serialization of `value`.
pub fn of_json<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("fingerprinted values serialize");
    of_bytes(&json)
}
