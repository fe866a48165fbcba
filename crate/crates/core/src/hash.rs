//! Fixed 64-bit mixing functions shared by the key index, the fallback
//! hashing scheme, and file checksums.
//!
//! All functions here are part of the on-disk and cross-language contract:
//! changing a constant changes every stored hash index.

/// Golden-ratio increment used to separate consecutive absorbed words.
pub const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

const MIX_M1: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_M2: u64 = 0x94D0_49BB_1331_11EB;

const FNV_OFFSET: u64 = 0xCBF2_9CE4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01B3;

/// The splitmix64 finalizer.
#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(MIX_M1);
    x ^= x >> 27;
    x = x.wrapping_mul(MIX_M2);
    x ^ (x >> 31)
}

/// Hash a token-id tuple under `seed`.
///
/// ```text
/// h = seed
/// for id in ids: h = mix64((h + GOLDEN) ^ id)
/// return mix64(h ^ len)
/// ```
#[inline]
pub fn hash_ids(seed: u64, ids: &[u32]) -> u64 {
    let mut h = seed;
    for &id in ids {
        h = mix64(h.wrapping_add(GOLDEN) ^ u64::from(id));
    }
    mix64(h ^ ids.len() as u64)
}

/// Incremental FNV-1a 64.
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a(FNV_OFFSET)
    }
}

impl Fnv1a {
    pub fn update(&mut self, bytes: &[u8]) {
        let mut h = self.0;
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
        self.0 = h;
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::default();
    h.update(bytes);
    h.finish()
}
