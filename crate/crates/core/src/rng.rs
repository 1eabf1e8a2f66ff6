//! Seeded substreams. Every generator takes a seed and a stream tag so that
//! independent components never share mutable RNG state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn substream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child seed from a parent seed and a text label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then mixed with the parent.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    mix(seed, h)
}

/// Derives a child seed from a parent seed and an index.
pub fn derive_index(seed: u64, index: u64) -> u64 {
    mix(seed, index.wrapping_add(0x5851_f42d_4c95_7f2d))
}

// splitmix64 finalizer
fn mix(seed: u64, label: u64) -> u64 {
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) mod streams {
    pub const FAMILY: u64 = 1;
    pub const ZERO_SUM: u64 = 2;
    pub const UNIT_ZERO_SUM: u64 = 3;
    pub const INVERTIBLE: u64 = 4;
}
