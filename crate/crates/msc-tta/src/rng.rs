//! Counter-based deterministic random streams.
//!
//! Every random draw in the simulator is keyed by (seed, domain, a, b, c)
//! rather than produced from shared mutable state, so results do not depend
//! on the order in which events are processed or on worker parallelism.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Key domains keep independent uses of the same (agent, tick) apart.
pub mod domain {
    pub const SAMPLE: u64 = 1;
    pub const TEACHER: u64 = 2;
    pub const SCHEDULE: u64 = 3;
    pub const WEATHER: u64 = 4;
    pub const WORLD_PARAMS: u64 = 5;
    pub const SPLIT: u64 = 6;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Mix a key tuple into a single 64-bit seed.
pub fn mix(seed: u64, dom: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut h = splitmix64(seed ^ 0xA076_1D64_78BD_642F);
    h = splitmix64(h ^ dom.wrapping_mul(0xE703_7ED1_A0B4_28DB));
    h = splitmix64(h ^ a.wrapping_mul(0x8EBC_6AF0_9C88_C6E3));
    h = splitmix64(h ^ b.wrapping_mul(0x5895_64A6_5C9A_ECC7));
    h = splitmix64(h ^ c.wrapping_mul(0x1D8E_4E27_C47D_124F));
    h
}

/// A small, fast RNG for one keyed draw sequence.
pub fn keyed_rng(seed: u64, dom: u64, a: u64, b: u64, c: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, dom, a, b, c))
}

/// Quantize a time in seconds to a millisecond key so that the same instant
/// always maps to the same stream regardless of how it was computed.
pub fn time_key(t_seconds: f64) -> u64 {
    (t_seconds * 1000.0).round() as u64
}
