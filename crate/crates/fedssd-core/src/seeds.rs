//! Deterministic seed derivation.
//!
//! A single master seed expands into independent sub-seeds for partitioning,
//! client sampling, data generation and per-client training. The scheme is a
//! fixed splitmix64 mix over (master, domain label, index), so any component's
//! RNG stream is reproducible in isolation.

/// splitmix64 finalizer.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derives a sub-seed from a master seed, a domain label and an index.
pub fn derive(master: u64, domain: &str, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ fnv1a(domain.as_bytes()) ^ splitmix64(index))
}

/// Derives a sub-seed from two indices (e.g. round and client id).
pub fn derive2(master: u64, domain: &str, a: u64, b: u64) -> u64 {
    derive(derive(master, domain, a), domain, b)
}

pub const DOMAIN_PARTITION: &str = "partition";
pub const DOMAIN_SAMPLING: &str = "sampling";
pub const DOMAIN_TRAINING: &str = "training";
pub const DOMAIN_DATA: &str = "data";
pub const DOMAIN_AUXILIARY: &str = "auxiliary";
pub const DOMAIN_INIT: &str = "init";
