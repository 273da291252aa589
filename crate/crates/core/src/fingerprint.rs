//! 8-byte artifact fingerprints (truncated SHA-256).
//!
//! Fingerprints tie checkpoints, codebooks and datasets together so that
//! incompatible artifacts are rejected instead of silently mixed.

use sha2::{Digest, Sha256};

/// First 8 bytes of SHA-256 over `bytes`, as a big-endian u64.
pub fn fingerprint_bytes(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_be_bytes(digest[..8].try_into().unwrap())
}

/// Fingerprint of a whole file.
pub fn fingerprint_file(path: &std::path::Path) -> std::io::Result<u64> {
    Ok(fingerprint_bytes(&std::fs::read(path)?))
}

/// Render a fingerprint the way manifests and headers store it.
pub fn to_hex(fp: u64) -> String {
    format!("{fp:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_and_content_sensitive() {
        let a = fingerprint_bytes(b"abc");
        assert_eq!(a, fingerprint_bytes(b"abc"));
        assert_ne!(a, fingerprint_bytes(b"abd"));
        assert_eq!(to_hex(a).len(), 16);
    }
}
