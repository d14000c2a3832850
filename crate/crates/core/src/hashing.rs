//! Stable hashing used for seeds, digests and deterministic choices.

use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

/// First 8 bytes of SHA-256 over the length-prefixed parts.
pub fn stable_hash64(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 is 32 bytes"))
}

/// Seed for a named sub-stream of `seed`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    stable_hash64(&[&seed.to_le_bytes(), label.as_bytes()])
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}
