//! Deterministic per-task seed derivation.
//!
//! One 64-bit master seed; per-task seeds are derived by hashing the task
//! kind and its numeric parameters with a fixed FNV-1a/SplitMix64 scheme, so
//! results are reproducible across platforms and thread counts.

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `master`, a task tag and numeric parameters.
pub fn derive(master: u64, tag: &str, params: &[f64], index: u64) -> u64 {
    let mut h = fnv1a(FNV_OFFSET ^ master, tag.as_bytes());
    for p in params {
        h = fnv1a(h, &p.to_bits().to_le_bytes());
    }
    h = fnv1a(h, &index.to_le_bytes());
    splitmix(h)
}
