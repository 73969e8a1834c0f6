//! Deterministic sub-seed derivation. Every random stream in a run is keyed
//! off the master seed plus a tag and a few indices, so changing one
//! component's consumption never shifts another component's stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derive a child seed from `master`, a string tag, and indices.
pub fn derive(master: u64, tag: &str, indices: &[u64]) -> u64 {
    // FNV-1a over the tag
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01B3);
    }
    let mut s = splitmix64(master ^ splitmix64(h));
    for &i in indices {
        s = splitmix64(s ^ splitmix64(i.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    s
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, tag: &str, indices: &[u64]) -> Rng {
    rng(derive(master, tag, indices))
}
