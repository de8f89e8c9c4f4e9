//! Stable hashes used for ids, script lookup and seed derivation.

use sha2::{Digest, Sha256};

/// First 8 bytes of SHA-256, big endian. Stable across platforms and releases.
pub fn stable_hash64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut buf = [0u8; 8];
    buf.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(buf)
}

pub fn hex64(value: u64) -> String {
    format!("{value:016x}")
}

/// Derives a child seed from a parent seed and a label.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut bytes = parent.to_be_bytes().to_vec();
    bytes.extend_from_slice(label.as_bytes());
    stable_hash64(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable() {
        // SHA-256("abc") = ba7816bf8f01cfea...
        assert_eq!(hex64(stable_hash64(b"abc")), "ba7816bf8f01cfea");
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_eq!(derive_seed(9, "x"), derive_seed(9, "x"));
    }
}
