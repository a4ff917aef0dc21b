//! Seeded randomness. Every stochastic choice in the crate flows from a
//! `u64` seed through ChaCha8, so identical seeds give bit-identical runs.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for a seed.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a named subsystem, so adding or
/// removing draws in one subsystem cannot shift another (e.g. the frozen
/// encoder weights stay fixed whether or not adapters are constructed).
pub fn subseed(seed: u64, domain: &str) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for b in domain.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    splitmix64(seed ^ h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fills a buffer with draws from U(-bound, bound).
pub fn fill_uniform(rng: &mut ChaCha8Rng, buf: &mut [f32], bound: f32) {
    for v in buf {
        *v = rng.gen_range(-bound..bound);
    }
}

/// Kaiming-style uniform bound for a weight with the given fan-in, scaled
/// by `gain`.
pub fn kaiming_bound(fan_in: usize, gain: f32) -> f32 {
    gain * (3.0 / fan_in as f32).sqrt()
}
