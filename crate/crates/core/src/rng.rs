//! Seeded randomness. Every stochastic component derives its generator from
//! one top-level seed plus a fixed per-module offset.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

/// Per-module seed offsets.
pub mod offset {
    pub const INIT: u64 = 0x1000;
    pub const SHUFFLE: u64 = 0x2000;
    pub const SYNTH: u64 = 0x3000;
    pub const SPLIT: u64 = 0x4000;
    pub const GRADCHECK: u64 = 0x5000;
}

pub fn seeded(seed: u64, offset: u64) -> Rng {
    Xoshiro256PlusPlus::seed_from_u64(seed.wrapping_add(offset))
}
