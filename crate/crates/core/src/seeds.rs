//! Derivation of independent RNG streams from one master seed, so per-frame
//! and per-burst randomness does not depend on processing order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for item `index` of stream `stream` under `master`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream) ^ index)
}

pub fn stream_rng(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}

/// Stream tags. Arbitrary but fixed constants.
pub mod stream {
    pub const IDENTITY_SPECS: u64 = 0x1D;
    pub const SCENE: u64 = 0x5C;
    pub const FRAME: u64 = 0xF7;
    pub const DETECT: u64 = 0xDE;
    pub const DETECT_BURST: u64 = 0xDB;
    pub const SHUFFLE: u64 = 0x5F;
    pub const AUGMENT: u64 = 0xA6;
    pub const RANDOM_SCORES: u64 = 0x7A;
}
