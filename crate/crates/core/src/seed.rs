//! Seed derivation so that every parallel unit of work owns an independent,
//! reproducible random stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The random source used throughout the crate.
pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a master seed with a stream tag and an index.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93)) ^ index)
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Stream tags; distinct constants keep derived streams disjoint.
pub mod stream {
    pub const PARTITION: u64 = 1;
    pub const SUBSET: u64 = 2;
    pub const FOLDS: u64 = 3;
    pub const DRAWS: u64 = 4;
    pub const KL: u64 = 5;
    pub const SUBSAMPLE: u64 = 6;
}
