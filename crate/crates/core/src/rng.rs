//! Named, per-purpose random streams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finaliser; good enough to decorrelate derived seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_str(s: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Seed for the stream `name` under `master`, optionally keyed by integers
/// (user id, query id, epoch, ...).
pub fn derive_seed(master: u64, name: &str, keys: &[u64]) -> u64 {
    let mut s = mix64(master ^ hash_str(name));
    for &k in keys {
        s = mix64(s ^ k);
    }
    s
}

pub fn stream(master: u64, name: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(master, name, &[]))
}

pub fn keyed_stream(master: u64, name: &str, keys: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(master, name, keys))
}
