//! Deterministic seed derivation.
//!
//! Every random stream in the crate is a `ChaCha8Rng` seeded through the
//! helpers below, so distinct purposes (data order, parameter init,
//! complementary labels, ...) get independent streams that never depend on
//! call timing or thread scheduling.

/// FNV-1a over a sequence of byte slices.
pub fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Derives a stream seed from a run seed and a purpose tag.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    fnv1a(&[&master.to_le_bytes(), tag.as_bytes()])
}

/// Derives the seed for one (method, repetition) run from the master seed.
///
/// Mixing the method name in keeps the streams of different methods
/// unrelated even when they share a repetition entry, so adding a method to
/// a config never perturbs the others.
pub fn derive_run_seed(master: u64, method: &str, entry: u64) -> u64 {
    fnv1a(&[&master.to_le_bytes(), method.as_bytes(), &entry.to_le_bytes()])
}
