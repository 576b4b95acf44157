//! Counter-based pseudo-randomness.
//!
//! Dropout masks and reparameterization noise are keyed by
//! `(seed, step, op_id, element)` through a splitmix64-style hash, so a run
//! is reproducible given a seed and independent of evaluation order.

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic hash of a stream key.
pub fn key(seed: u64, step: u64, op: u64, idx: u64) -> u64 {
    splitmix(splitmix(splitmix(splitmix(seed) ^ step) ^ op) ^ idx)
}

/// Uniform in [0, 1).
pub fn uniform(seed: u64, step: u64, op: u64, idx: u64) -> f64 {
    (key(seed, step, op, idx) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal via Box-Muller on two counter draws.
pub fn normal(seed: u64, step: u64, op: u64, idx: u64) -> f64 {
    let u1 = uniform(seed, step, op, idx.wrapping_mul(2));
    let u2 = uniform(seed, step, op, idx.wrapping_mul(2).wrapping_add(1));
    // Guard u1 away from 0 so the log is finite.
    let u1 = u1.max(1e-300);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
