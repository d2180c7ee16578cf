//! Deterministic randomness.
//!
//! Every stochastic choice in the pipeline draws from a ChaCha stream seeded
//! through [`derive_seed`], so a single master seed fixes the whole run and
//! independent subsystems never share a stream.

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive a sub-seed from a master seed, a purpose tag, and an index.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    splitmix64(master ^ fnv1a64(tag.as_bytes()) ^ splitmix64(index))
}

/// The RNG used throughout the crate.
pub type CrateRng = ChaCha12Rng;

pub fn rng_from(seed: u64) -> CrateRng {
    ChaCha12Rng::seed_from_u64(seed)
}

pub fn standard_normal(rng: &mut CrateRng) -> f64 {
    rng.sample(StandardNormal)
}

/// C-order (channel, row, col) tensor of unit Gaussians.
pub fn normal_array3(shape: (usize, usize, usize), rng: &mut CrateRng) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
}
