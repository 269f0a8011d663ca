//! Named sub-seeds. Every random stream in a run is derived from the
//! manifest seed plus a stream name, so adding a stream never perturbs the
//! others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable across platforms and compiler versions (FNV-1a then splitmix).
pub fn derive_seed(base: u64, stream: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(base ^ splitmix64(h))
}

pub fn stream(base: u64, name: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(base, name))
}
