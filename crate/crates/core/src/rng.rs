//! Reproducible random streams.
//!
//! All randomness goes through xoshiro256++ seeded via splitmix64, so a
//! given seed yields the same parameters, datasets and training runs on
//! every platform. Independent streams are derived by mixing a stream index
//! into the seed with one splitmix64 step.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type SeedRng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> SeedRng {
    SeedRng::seed_from_u64(seed)
}

/// splitmix64 finaliser.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A stream determined by `seed` and a path of stream indices.
pub fn stream(seed: u64, path: &[u64]) -> SeedRng {
    let s = path.iter().fold(mix(seed), |acc, &p| mix(acc ^ p.wrapping_mul(0x2545_f491_4f6c_dd1d)));
    seeded(s)
}
