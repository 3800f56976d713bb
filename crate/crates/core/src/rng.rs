//! Deterministic RNG streams. Every random draw in a run comes from a
//! ChaCha stream keyed by the run seed plus a purpose tag, so no generator
//! state has to be carried between phases or persisted in checkpoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod purpose {
    pub const BASE_INIT: u64 = 1;
    pub const LORA_INIT: u64 = 2;
    pub const DATA: u64 = 3;
    pub const PARTITION: u64 = 4;
    pub const PUBLIC: u64 = 5;
    pub const ALIGN_BATCH: u64 = 6;
    pub const CLIENT_BATCH: u64 = 7;
    pub const PRETRAIN: u64 = 8;
    pub const EVAL: u64 = 9;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(base), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn stream(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Standard normal draw (Box-Muller, one value per pair of uniforms).
pub fn normal(rng: &mut impl Rng) -> f64 {
    let u1 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}
