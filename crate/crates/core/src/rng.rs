//! Every random draw flows from one `u64` seed. Components derive their own
//! independent streams from `(seed, label, index)`, so a stream's contents do
//! not depend on how many draws any other component made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(label)).wrapping_add(index))
}

pub fn stream(seed: u64, label: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, label, index))
}
