//! Deterministic, platform-stable hashing primitives.
//!
//! Mock backends and prompt identity must be bit-identical for a given seed
//! across processes, platforms, and thread schedules, so nothing here uses
//! `std::hash` (whose hasher is allowed to change between releases). Every
//! draw is a pure function of its inputs: the parts are length-prefixed,
//! fed through SHA-256, and the leading bytes of the digest are folded into
//! a `u64` or a unit-interval `f64`.

use sha2::{Digest, Sha256};

/// Stable 64-bit digest of an ordered list of string parts.
///
/// Parts are length-prefixed before hashing so `["ab", "c"]` and
/// `["a", "bc"]` never collide by concatenation.
pub fn stable_hash(parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_be_bytes());
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Uniform draw in `[0, 1)` derived from [`stable_hash`].
///
/// Uses the top 53 bits so the result is an exactly-representable dyadic
/// rational; the draw is reproducible bit-for-bit everywhere.
pub fn stable_unit(parts: &[&str]) -> f64 {
    const DENOM: f64 = (1u64 << 53) as f64;
    (stable_hash(parts) >> 11) as f64 / DENOM
}

/// Stable textual id for a prompt: the first 16 hex chars of SHA-256(text).
pub fn text_id(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
