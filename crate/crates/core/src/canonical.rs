//! Canonical (sorted-key) JSON encoding and content hashing.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Serializes `value` as compact JSON with object keys in sorted order.
pub fn to_canonical_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    // serde_json::Value keeps maps in a BTreeMap, so a round trip through it sorts keys.
    let v = serde_json::to_value(value)?;
    serde_json::to_string(&v)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Unsorted {
        zeta: u8,
        alpha: u8,
    }

    #[test]
    fn keys_are_sorted() {
        let s = to_canonical_json(&Unsorted { zeta: 1, alpha: 2 }).unwrap();
        assert_eq!(s, r#"{"alpha":2,"zeta":1}"#);
    }
}
