//! Stable seed derivation. Every random stream in the crate is keyed by a
//! master seed plus a path of integers, so results do not depend on call
//! order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `master` with each element of `path` in order.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(master), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng_for(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}

/// Stream labels used as the first path element, so unrelated consumers of
/// the same master seed never share a stream.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const CALIBRATION: u64 = 3;
    pub const PARTITION: u64 = 4;
    pub const META_PIPELINE: u64 = 5;
    pub const ADAPT_SOURCE: u64 = 6;
    pub const ADAPT_CAL: u64 = 7;
    pub const VIEWS: u64 = 8;
    pub const AUGMENT: u64 = 9;
    pub const DEGRADE: u64 = 10;
    pub const SYNTH: u64 = 11;
    pub const HEAD: u64 = 12;
    pub const SUBSET: u64 = 13;
}
