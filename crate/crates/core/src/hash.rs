//! 64-bit integer mixing used for key->bucket hashing, sequence-id
//! derivation, and per-node RNG seed derivation.
//!
//! Determinism across nodes and runs is the binding requirement here, so we
//! pin one published finalizer (the 64-bit multiply-xor-shift finalizer used
//! by MurmurHash3) instead of relying on a hasher whose output could change
//! between library versions.

/// MurmurHash3 fmix64 finalizer.
#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^= x >> 33;
    x
}

/// Mixes a sequence of words into a single 64-bit value. Order matters.
#[inline]
pub fn mix_words(words: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &w in words {
        h = mix64(h ^ w).wrapping_add(0x9e37_79b9_7f4a_7c15);
    }
    mix64(h)
}

/// Derives a 32-byte RNG seed from a root seed and a role tag.
pub fn derive_seed(root: u64, tag: &[u64]) -> [u8; 32] {
    let mut out = [0u8; 32];
    let mut h = mix64(root ^ 0x5851_f42d_4c95_7f2d);
    for &t in tag {
        h = mix64(h ^ t);
    }
    for (i, chunk) in out.chunks_mut(8).enumerate() {
        let word = mix64(h.wrapping_add(i as u64 + 1));
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    out
}
