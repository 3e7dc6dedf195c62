//! Small deterministic helpers shared across the crate.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// splitmix64 step; good avalanche, used to derive independent sub-seeds.
pub fn splitmix64(state: &mut u64) {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
}

/// One full splitmix64 output for the given state (state is advanced).
pub fn splitmix64_next(state: &mut u64) -> u64 {
    splitmix64(state);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a label, order-independently.
/// Used so per-record noise streams do not depend on enumeration order.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut state = base ^ 0xA076_1D64_78BD_642F;
    for &b in label.as_bytes() {
        state ^= b as u64;
        state = splitmix64_next(&mut state);
    }
    splitmix64_next(&mut state)
}

/// ChaCha20 stream seeded from a u64 (zero-padded key, exact default stream).
pub fn rng_from_seed(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// SHA-256 of a byte slice as lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_is_label_sensitive() {
        let a = derive_seed(42, "img001_y0_x0");
        let b = derive_seed(42, "img001_y0_x128");
        let c = derive_seed(43, "img001_y0_x0");
        assert_ne!(a, b);
        assert_ne!(a, c);
        // stable across calls
        assert_eq!(a, derive_seed(42, "img001_y0_x0"));
    }

    #[test]
    fn sha256_known_value() {
        // SHA-256 of the empty string.
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
