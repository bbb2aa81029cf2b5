//! Seeded randomness.
//!
//! All stochastic operations take an explicit `u64` seed. Generators are
//! xoshiro256++ seeded through SplitMix64, and independent sub-streams are
//! derived by mixing a tag into the parent seed.

use alloc::vec::Vec;

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::tensor::Tensor;

pub type Rng = Xoshiro256PlusPlus;

pub fn rng(seed: u64) -> Rng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of an independent sub-stream of `seed` identified by `tag`.
pub fn derive(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

pub fn gaussian(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Uniform on `[0, 1)`.
pub fn unit(rng: &mut Rng) -> f64 {
    rng.random::<f64>()
}

pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit(rng)
}

/// Uniform integer in `0..n`.
pub fn index(rng: &mut Rng, n: usize) -> usize {
    rng.random_range(0..n)
}

/// Standard Laplace draw (location 0, scale 1) by inverse CDF.
pub fn laplace(rng: &mut Rng) -> f64 {
    let u = unit(rng) - 0.5;
    let s = if u < 0.0 { -1.0 } else { 1.0 };
    -s * libm::log(1.0 - 2.0 * libm::fabs(u)).max(f64::MIN)
}

pub fn gaussian_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| gaussian(rng)).collect();
    Tensor::from_parts(crate::tensor::Shape::new(rows, cols), data)
}

pub fn uniform_tensor(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| uniform(rng, lo, hi)).collect();
    Tensor::from_parts(crate::tensor::Shape::new(rows, cols), data)
}

/// Fisher–Yates permutation of `0..n`.
pub fn permutation(rng: &mut Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = index(rng, i + 1);
        p.swap(i, j);
    }
    p
}
