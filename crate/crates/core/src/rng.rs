//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by
//! `(seed, domain, index)`, so per-subject, per-epoch and per-replicate
//! streams are independent of iteration order and thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named stream domains.
pub mod domain {
    pub const INIT: u64 = 1;
    pub const EPOCH: u64 = 2;
    pub const SUBJECT: u64 = 3;
    pub const BOOTSTRAP: u64 = 4;
    pub const PAIRED: u64 = 5;
    pub const FOLDS: u64 = 6;
    pub const PERMUTE: u64 = 7;
    pub const ABLATION: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A generator seeded from `seed` alone.
pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Stream `index` within `domain` for a given base seed.
pub fn stream(seed: u64, domain: u64, index: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(splitmix64(seed ^ splitmix64(domain)));
    rng.set_stream(index);
    rng
}

/// Derive a child seed; used when a sub-component takes a plain `u64` seed.
pub fn derive_seed(seed: u64, domain: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(domain)).wrapping_add(index))
}
