//! Deterministic randomness keyed by `(seed, label)`.
//!
//! Every stream is a ChaCha20 keystream whose key is `SHA-256(seed_le || label)`.
//! Two parties holding the same seed derive the same stream for a label
//! without coordinating on draw order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// A reproducible random stream bound to a `(seed, label)` pair.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    label: String,
    inner: ChaCha20Rng,
}

/// Derives the stream for `(seed, label)`.
pub fn derive_rng(seed: u64, label: impl Into<String>) -> SeededRng {
    let label = label.into();
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    SeededRng {
        seed,
        label,
        inner: ChaCha20Rng::from_seed(key),
    }
}

impl SeededRng {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Derives a child stream whose label is `"<parent>/<suffix>"`.
    pub fn child(&self, suffix: &str) -> SeededRng {
        derive_rng(self.seed, format!("{}/{}", self.label, suffix))
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
