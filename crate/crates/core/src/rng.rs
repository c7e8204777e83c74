//! Deterministic randomness for the whole pipeline.
//!
//! Everything random in this crate flows through ChaCha8 streams derived
//! from `(seed, domain, index)`. The float/shuffle/gaussian derivations
//! are written out here rather than pulled from a distributions crate so
//! that replay holds bit-for-bit across platforms and dependency bumps:
//! the only moving part is the ChaCha8 block function, which is specified.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// 2^-53, the spacing used to map 53 random bits onto [0, 1).
const UNIT_SCALE: f64 = 1.0 / (1u64 << 53) as f64;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A generator for one purpose-tagged stream. Distinct domains (and
/// distinct indices within a domain, e.g. one stream per example) never
/// share state, so adding a consumer in one stage cannot shift the draws
/// seen by another.
pub fn stream(seed: u64, domain: &str, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a64(domain.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..32].copy_from_slice(b"MG-RNG-1");
    ChaCha8Rng::from_seed(key)
}

/// Uniform draw from [0, 1) using the top 53 bits of one u64.
pub fn unit(rng: &mut (impl RngCore + ?Sized)) -> f64 {
    (rng.next_u64() >> 11) as f64 * UNIT_SCALE
}

/// Uniform draw from [lo, hi).
pub fn uniform(rng: &mut (impl RngCore + ?Sized), lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit(rng)
}

/// Standard normal via Box-Muller. Consumes exactly two u64s per call;
/// the sine branch is discarded so consumption stays fixed.
pub fn gaussian(rng: &mut (impl RngCore + ?Sized)) -> f64 {
    let u1 = unit(rng);
    let u2 = unit(rng);
    // 1 - u1 lies in (0, 1], so the log is finite.
    let r = (-2.0 * (1.0 - u1).ln()).sqrt();
    r * (std::f64::consts::TAU * u2).cos()
}

/// Unbiased index in [0, n) by rejection below the largest multiple of n.
pub fn index(rng: &mut (impl RngCore + ?Sized), n: usize) -> usize {
    assert!(n > 0, "index: empty range");
    let n = n as u64;
    let zone = u64::MAX - u64::MAX % n;
    loop {
        let x = rng.next_u64();
        if x < zone {
            return (x % n) as usize;
        }
    }
}

/// Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut (impl RngCore + ?Sized), items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = index(rng, i + 1);
        items.swap(i, j);
    }
}

/// Coin flip with probability `p` of true.
pub fn coin(rng: &mut (impl RngCore + ?Sized), p: f64) -> bool {
    unit(rng) < p
}
